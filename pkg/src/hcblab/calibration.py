"""Coordinate-descent tuning of workload knobs toward target miss-class shares."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import analytics, netsim, scenario


@dataclass(frozen=True)
class CalibrationTarget:
    stale_share: float = 0.6745
    selfish_share: float = 0.3220
    later_share: float = 0.0035
    tolerance: float = 0.15

    def __post_init__(self) -> None:
        total = self.stale_share + self.selfish_share + self.later_share
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"target shares sum to {total}, not 1")

    def as_dict(self) -> dict[str, float]:
        return {"stale": self.stale_share, "selfish": self.selfish_share, "later": self.later_share}

    def distance(self, shares: dict[str, float]) -> float:
        return sum(abs(shares[k] - v) for k, v in self.as_dict().items())


# candidate values per knob, searched in this order
DEFAULT_GRID: dict[str, tuple[float, ...]] = {
    "selfish_fraction": (0.0, 0.02, 0.05, 0.08, 0.12, 0.16, 0.2, 0.3),
    "relay_cap_scale": (0.25, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0),
    "latency_scale": (0.5, 1.0, 2.0, 4.0),
}


def apply_knobs(base: dict, knobs: dict[str, float]) -> dict:
    sc = copy.deepcopy(base)
    if "selfish_fraction" in knobs:
        sc["workload"]["selfish_fraction"] = knobs["selfish_fraction"]
    if "relay_cap_scale" in knobs:
        s = knobs["relay_cap_scale"]
        relay = sc["pools"]["relay"]
        for cap in ("pending_cap", "queue_cap"):
            relay[cap] = max(1, int(round(base["pools"]["relay"][cap] * s)))
    if "latency_scale" in knobs:
        # link latency and the per-hop relay delay move together
        s = knobs["latency_scale"]
        sc["topology"]["latency_scale"] = base["topology"].get("latency_scale", 1.0) * s
        sc["workload"]["tx_relay_delay_ms"] = base["workload"]["tx_relay_delay_ms"] * s
    return sc


def measure_shares(sc: dict) -> tuple[dict[str, float], int]:
    b = scenario.build(sc)
    res = netsim.run(b.topology, b.workload, b.miner, b.until, b.seed, b.predictor)
    records = analytics.miss_records(res.events)
    return analytics.miss_shares(records), len(records)


@dataclass
class CalibrationResult:
    scenario: dict
    knobs: dict[str, float]
    shares: dict[str, float]
    distance: float
    runs: int
    history: list[dict] = field(default_factory=list)

    def report(self) -> dict:
        return {"knobs": self.knobs, "shares": self.shares, "distance": self.distance,
                "runs": self.runs, "history": self.history}

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True) + "\n"


def calibrate(
    base: dict,
    target: CalibrationTarget = CalibrationTarget(),
    budget: int = 50,
    grid: Optional[dict[str, tuple[float, ...]]] = None,
    start: Optional[dict[str, float]] = None,
    sweeps: int = 3,
    measure: Callable[[dict], tuple[dict[str, float], int]] = measure_shares,
) -> CalibrationResult:
    """Minimise the L1 share distance one knob at a time; each distinct knob setting costs one run."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = grid or DEFAULT_GRID
    current = dict(start or {k: (1.0 if k.endswith("scale") else base["workload"]["selfish_fraction"])
                             for k in grid})
    cache: dict[tuple, tuple[float, dict]] = {}
    history: list[dict] = []

    def cost(knobs: dict) -> Optional[float]:
        key = tuple(sorted(knobs.items()))
        if key in cache:
            return cache[key][0]
        if len(cache) >= budget:
            return None
        shares, n = measure(apply_knobs(base, knobs))
        d = target.distance(shares) if n else float("inf")
        cache[key] = (d, shares)
        history.append({"knobs": dict(knobs), "shares": shares, "misses": n, "distance": d})
        return d

    best = cost(current)
    for _ in range(sweeps):
        improved = False
        for name, values in grid.items():
            for v in values:
                if v == current[name]:
                    continue
                trial = {**current, name: v}
                d = cost(trial)
                if d is None:
                    break
                if d < best:
                    best, current, improved = d, trial, True
        if not improved:
            break
    d, shares = cache[tuple(sorted(current.items()))]
    return CalibrationResult(apply_knobs(base, current), current, shares, d, len(cache), history)
