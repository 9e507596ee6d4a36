"""Scenario files: JSON schema, defaults merging and translation to simulator inputs.

A scenario file is a partial document. It is validated against SCHEMA
(unknown keys rejected at every level), deep-merged over the shipped
defaults and then turned into a Topology, Workload and MinerModel.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import jsonschema

from .netsim import (
    ConfigError,
    Edge,
    FeeDistribution,
    MinerModel,
    NodeSpec,
    Topology,
    Workload,
    build_edges,
    generate_graph,
)
from .prediction import BayesModel, BayesPredictor, ConstantPredictor, Predictor
from .protocol import ProtocolKind

KINDS = [k.value for k in ProtocolKind]

_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 0}


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


_caps = _obj({"pending_cap": {"type": "integer", "minimum": 1},
              "queue_cap": {"type": "integer", "minimum": 1},
              "secondary_cap": _count})

_ids = {"oneOf": [_count, {"type": "array", "items": _count, "uniqueItems": True}]}

SCHEMA = _obj({
    "name": {"type": "string"},
    "seed": _count,
    "duration_ms": _pos,
    "protocol": {"enum": KINDS},
    "topology": {"oneOf": [
        _obj({
            "generator": {"enum": ["ring", "random_regular"]},
            "n": {"type": "integer", "minimum": 2},
            "degree": {"type": "integer", "minimum": 1},
            "latency_ms": {"type": "array", "items": _nonneg, "minItems": 2, "maxItems": 2},
            "bandwidth_Bps": _pos,
            "latency_scale": _nonneg,
            "seed": _count,
        }),
        _obj({
            "nodes": {"type": "integer", "minimum": 1},
            "edges": {"type": "array", "items": _obj(
                {"a": _count, "b": _count, "latency_ms": _nonneg, "bandwidth_Bps": _pos},
                ("a", "b", "latency_ms", "bandwidth_Bps"))},
            "latency_scale": _nonneg,
        }, ("nodes", "edges")),
    ]},
    "roles": _obj({"miners": _ids, "selfish": _ids}),
    "pools": _obj({"miner": _caps, "relay": _caps}),
    "overrides": {"type": "array", "items": _obj({
        "id": _count,
        "kind": {"enum": KINDS},
        "hcb_capable": {"type": "boolean"},
        "pending_cap": {"type": "integer", "minimum": 1},
        "queue_cap": {"type": "integer", "minimum": 1},
        "secondary_cap": _count,
    }, ("id",))},
    "workload": _obj({
        "tx_rate": _nonneg,
        "fee": _obj({k: _pos for k in ("tip_median_gwei", "tip_min_gwei", "tip_max_gwei")}
                    | {"tip_sigma": _nonneg, "headroom_low": _nonneg, "headroom_high": _nonneg}),
        "payload_mean_bytes": _nonneg,
        "payload_step_bytes": {"type": "integer", "minimum": 1},
        "selfish_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "accounts": {"type": "integer", "minimum": 1},
        "private_accounts": {"type": "integer", "minimum": 1},
        "tx_relay_delay_ms": _nonneg,
        "private_delay_ms": _nonneg,
    }),
    "miner_model": _obj({
        "mean_interval_ms": _pos,
        "reset_ms": _nonneg,
        "assemble_ms": _nonneg,
        "block_cap": _count,
        "initial_base_fee_gwei": _pos,
    }),
    "predictor": _obj({"kind": {"enum": ["reference", "constant", "file"]},
                       "missing": {"type": "boolean"},
                       "path": {"type": "string"}}),
    "output_dir": {"type": "string"},
})


def load_defaults() -> dict:
    text = resources.files("hcblab").joinpath("data/defaults.json").read_text()
    return json.loads(text)


def _locate(text: str, path: list) -> Optional[int]:
    """Best-effort line number of a JSON path inside the raw text."""
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        hit = text.find(json.dumps(key), pos)
        if hit < 0:
            return None
        pos = hit
    return text.count("\n", 0, pos) + 1 if path else None


def validate(doc: dict, text: str = "", source: str = "<scenario>") -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    lines = []
    for err in errors:
        path = list(err.absolute_path)
        field = "/".join(str(p) for p in path) or "<root>"
        probe = path
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            probe = path + extra[:1]
        line = _locate(text, probe) if text else None
        where = f"{source}:{line}" if line else source
        lines.append(f"{where}: field {field}: {err.message}")
    raise ConfigError("\n".join(lines))


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not _is_topology_switch(k, out[k], v):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_topology_switch(key: str, old: dict, new: dict) -> bool:
    # an explicit edge list replaces a generator block wholesale and vice versa
    return key == "topology" and (("edges" in new) != ("edges" in old))


def parse(text: str, source: str = "<scenario>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: field <root>: scenario must be a JSON object")
    validate(doc, text, source)
    merged = merge(load_defaults(), doc)
    validate(merged, "", source)
    return merged


def load(path: Union[str, Path]) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read scenario: {exc.strerror}") from exc
    return parse(text, str(p))


# ----- translation -----

def _resolve_ids(sel, n: int, what: str) -> set[int]:
    if isinstance(sel, int):
        if sel > n:
            raise ConfigError(f"field roles/{what}: {sel} exceeds node count {n}")
        return set(range(sel))
    bad = [i for i in sel if i >= n]
    if bad:
        raise ConfigError(f"field roles/{what}: unknown node ids {bad}")
    return set(sel)


@dataclass
class Built:
    topology: Topology
    workload: Workload
    miner: MinerModel
    until: float
    seed: int
    predictor: Predictor


def build_topology(sc: dict) -> Topology:
    t = sc["topology"]
    seed = t.get("seed", sc["seed"])
    scale = t.get("latency_scale", 1.0)
    if "edges" in t:
        n = t["nodes"]
        edges = [Edge(e["a"], e["b"], e["latency_ms"] * scale, e["bandwidth_Bps"]) for e in t["edges"]]
    else:
        n = t["n"]
        g = generate_graph(t["generator"], n, t["degree"], seed)
        lo, hi = t["latency_ms"]
        if hi < lo:
            raise ConfigError("field topology/latency_ms: upper bound below lower bound")
        edges = [Edge(e.a, e.b, e.latency_ms * scale, e.bandwidth_Bps)
                 for e in build_edges(g, (lo, hi), t["bandwidth_Bps"], seed)]
    miners = _resolve_ids(sc["roles"]["miners"], n, "miners")
    selfish = _resolve_ids(sc["roles"]["selfish"], n, "selfish")
    kind = ProtocolKind(sc["protocol"])
    nodes = []
    for i in range(n):
        caps = sc["pools"]["miner" if i in miners else "relay"]
        nodes.append(NodeSpec(i, kind, True, i in miners, i in selfish,
                              caps["pending_cap"], caps["queue_cap"], caps["secondary_cap"]))
    for ov in sc["overrides"]:
        if ov["id"] >= n:
            raise ConfigError(f"field overrides: unknown node id {ov['id']}")
        node = nodes[ov["id"]]
        for k, v in ov.items():
            if k != "id":
                setattr(node, k, ProtocolKind(v) if k == "kind" else v)
    topo = Topology(nodes, edges)
    topo.validate()
    return topo


def build_predictor(sc: dict) -> Predictor:
    p = sc["predictor"]
    if p["kind"] == "constant":
        return ConstantPredictor(p.get("missing", False))
    if p["kind"] == "file":
        if "path" not in p:
            raise ConfigError("field predictor/path: required when kind is 'file'")
        try:
            return BayesPredictor(BayesModel.load(p["path"]))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"field predictor/path: cannot load model: {exc}") from exc
    return BayesPredictor()


def build(sc: dict) -> Built:
    w = dict(sc["workload"])
    fee = FeeDistribution(**w.pop("fee"))
    workload = Workload(fee=fee, duration_ms=sc["duration_ms"], **w)
    miner = MinerModel(**sc["miner_model"])
    workload.validate()
    miner.validate()
    return Built(build_topology(sc), workload, miner, float(sc["duration_ms"]), int(sc["seed"]),
                 build_predictor(sc))
