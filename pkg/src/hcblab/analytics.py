"""Closed-form models and metrics computed from simulation event logs."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


# ----- empty-block and throughput model -----

@dataclass(frozen=True)
class EmptyBlockModel:
    t_g: float = 13000.0
    t_a_coeffs: tuple[float, float] = (12.9, 56.5)
    t_p_coeffs: tuple[float, float] = (73.9, -37.9)
    M: int = 200

    def __post_init__(self) -> None:
        if self.t_g <= 0:
            raise ValueError("t_g must be positive")

    def assemble_ms(self, k: float) -> float:
        return self.t_a_coeffs[0] * k + self.t_a_coeffs[1]

    def reset_ms(self, k: float) -> float:
        return self.t_p_coeffs[0] * k + self.t_p_coeffs[1]

    def window_ms(self, k: float) -> float:
        return self.assemble_ms(k) + self.reset_ms(k)


def empty_block_prob(model: EmptyBlockModel, k: float) -> float:
    """Probability that the next block lands inside the reset + assembly window."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return -math.expm1(-model.window_ms(k) / model.t_g)


def tps(model: EmptyBlockModel, k: float) -> float:
    return (1.0 - empty_block_prob(model, k)) * model.M / (model.t_g / 1000.0)


def model_table(model: EmptyBlockModel, ks: Iterable[int]) -> list[dict]:
    return [{"k": k, "p_empty": empty_block_prob(model, k), "tps": tps(model, k)} for k in ks]


# ----- miss taxonomy -----

class MissClass(str, enum.Enum):
    STALE = "stale"
    SELFISH = "selfish"
    LATER = "later"


@dataclass(frozen=True)
class MissRecord:
    tx_hash: str
    t_r: Optional[float]
    t_c: float
    height: int = 0
    node: int = 0


def classify_miss(rec: MissRecord) -> MissClass:
    if rec.t_r is None:
        return MissClass.SELFISH
    if rec.t_r <= rec.t_c:
        return MissClass.STALE
    return MissClass.LATER


def miss_records(events: Iterable[dict]) -> list[MissRecord]:
    return [
        MissRecord(e["tx"], e["t_r"], e["t_c"], e["height"], e["node"])
        for e in events if e["event"] == "miss"
    ]


def miss_shares(records: Sequence[MissRecord]) -> dict[str, float]:
    counts = {c.value: 0 for c in MissClass}
    for r in records:
        counts[classify_miss(r).value] += 1
    total = sum(counts.values())
    return {k: (v / total if total else 0.0) for k, v in counts.items()}


# ----- reconstruction metrics -----

def _reconstructs(events: Iterable[dict]) -> list[dict]:
    return [e for e in events if e["event"] == "reconstruct"]


def matched_metrics(events: Iterable[dict]) -> Optional[dict]:
    """Matched-block probability and mean per-block fraction of locally known entries."""
    recs = _reconstructs(events)
    if not recs:
        return None
    matched = sum(1 for r in recs if r["matched"]) / len(recs)
    rates = [r["present"] / r["entries"] if r["entries"] else 1.0 for r in recs]
    return {"matched_block_prob": matched, "matched_tx_rate": float(np.mean(rates)), "blocks": len(recs)}


def pool_similarity(a: Iterable, b: Iterable) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


@dataclass(frozen=True)
class PropagationModel:
    t_x: float
    t_y: float
    rho: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def predicted(self) -> float:
        return self.t_x + (1.0 - self.rho) * self.t_y


@dataclass(frozen=True)
class PropagationFit:
    model: PropagationModel
    observed: float
    residual: float

    @property
    def relative_residual(self) -> float:
        return self.residual / self.observed if self.observed else 0.0


def propagation_fit(events: Iterable[dict]) -> Optional[PropagationFit]:
    """Per compact/hybrid reception: first-message time plus, if unmatched, one round trip."""
    recs = _reconstructs(events)
    if len(recs) < 10:
        return None
    t_x = np.array([r["t_arrive"] - r["t_send"] for r in recs])
    total = np.array([r["t_done"] - r["t_send"] for r in recs])
    unmatched = [r["rtt"] for r in recs if not r["matched"]]
    rho = 1.0 - len(unmatched) / len(recs)
    t_y = float(np.mean(unmatched)) if unmatched else 0.0
    model = PropagationModel(float(t_x.mean()), t_y, rho)
    observed = float(total.mean())
    return PropagationFit(model, observed, abs(observed - model.predicted))


# ----- report -----

QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0)
PROP_BINS_MS = (0, 100, 200, 300, 500, 750, 1000, 1500, 2000, 3000, 5000, math.inf)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6f}"
    return str(v)


@dataclass
class Report:
    rows: list[tuple[str, str, object]]

    def to_csv(self) -> str:
        lines = [f"{'section':<20},{'key':<32},{'value':>18}"]
        for sec, key, val in self.rows:
            lines.append(f"{sec:<20},{key:<32},{_fmt(val):>18}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out: dict = {}
        for sec, key, val in self.rows:
            if isinstance(val, float):
                val = None if math.isnan(val) else (float(_fmt(val)) if not math.isinf(val) else "inf")
            out.setdefault(sec, {})[key] = val
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def get(self, section: str, key: str):
        for sec, k, v in self.rows:
            if sec == section and k == key:
                return v
        raise KeyError((section, key))


def summarize(events: Sequence[dict]) -> Report:
    rows: list[tuple[str, str, object]] = []

    mined = [e for e in events if e["event"] == "block_mined"]
    forced = sum(1 for e in mined if e["forced_empty"])
    rows.append(("chain", "blocks_mined", len(mined)))
    rows.append(("chain", "empty_blocks", forced))
    rows.append(("chain", "empty_block_rate", forced / len(mined) if mined else None))
    rows.append(("chain", "races_skipped", sum(1 for e in events if e["event"] == "race_skipped")))
    rows.append(("chain", "mean_txs_per_block",
                 float(np.mean([e["txs"] for e in mined])) if mined else None))

    mm = matched_metrics(events)
    rows.append(("matching", "receptions", mm["blocks"] if mm else 0))
    rows.append(("matching", "matched_block_prob", mm["matched_block_prob"] if mm else None))
    rows.append(("matching", "matched_tx_rate", mm["matched_tx_rate"] if mm else None))

    fit = propagation_fit(events)
    rows.append(("propagation", "t_x_ms", fit.model.t_x if fit else None))
    rows.append(("propagation", "t_y_ms", fit.model.t_y if fit else None))
    rows.append(("propagation", "rho", fit.model.rho if fit else None))
    rows.append(("propagation", "observed_ms", fit.observed if fit else None))
    rows.append(("propagation", "predicted_ms", fit.model.predicted if fit else None))
    rows.append(("propagation", "relative_residual", fit.relative_residual if fit else None))

    delays = np.array([e["delay"] for e in events if e["event"] == "block_applied" and e["delay"] > 0])
    rows.append(("block_delay", "count", int(delays.size)))
    rows.append(("block_delay", "mean_ms", float(delays.mean()) if delays.size else None))
    for lo, hi in zip(PROP_BINS_MS, PROP_BINS_MS[1:]):
        n = int(((delays >= lo) & (delays < hi)).sum()) if delays.size else 0
        rows.append(("block_delay", f"hist_{lo}_{hi}", n))

    records = miss_records(events)
    shares = miss_shares(records)
    rows.append(("misses", "count", len(records)))
    for cls in MissClass:
        rows.append(("misses", f"{cls.value}_share", shares[cls.value]))
    later = [r.t_r - r.t_c for r in records if classify_miss(r) is MissClass.LATER]
    rows.append(("misses", "later_mean_lag_ms", float(np.mean(later)) if later else None))

    sizes: dict[str, list[int]] = {}
    for e in events:
        if e["event"] == "send":
            sizes.setdefault(e["msg"], []).append(e["bytes"])
    for tag in sorted(sizes):
        arr = np.array(sizes[tag])
        rows.append((f"size_{tag}", "count", int(arr.size)))
        rows.append((f"size_{tag}", "total_bytes", int(arr.sum())))
        for q in QUANTILES:
            rows.append((f"size_{tag}", f"q{q:g}", float(np.quantile(arr, q))))
    return Report(rows)
