import json
import os
from importlib import resources

import numpy as np
import pytest

from hcblab import scenario
from hcblab.calibration import (
    DEFAULT_GRID,
    CalibrationTarget,
    apply_knobs,
    calibrate,
    measure_shares,
)

DATA = resources.files("hcblab").joinpath("data/scenarios")


def small_bcb(seed):
    sc = scenario.load(str(DATA.joinpath("small.json")))
    return {**sc, "protocol": "BCB", "seed": seed}


def test_target_validation_and_distance():
    t = CalibrationTarget()
    assert t.distance(t.as_dict()) == 0.0
    assert abs(t.distance({"stale": 1.0, "selfish": 0.0, "later": 0.0}) - 2 * 0.3255) < 1e-12
    with pytest.raises(ValueError):
        CalibrationTarget(0.5, 0.5, 0.5)


def test_apply_knobs_touches_only_its_fields():
    base = small_bcb(1)
    sc = apply_knobs(base, {"selfish_fraction": 0.3, "relay_cap_scale": 0.5, "latency_scale": 2.0})
    assert sc["workload"]["selfish_fraction"] == 0.3
    assert sc["pools"]["relay"]["pending_cap"] == 32 and sc["pools"]["relay"]["queue_cap"] == 8
    assert sc["topology"]["latency_scale"] == 2.0
    assert sc["workload"]["tx_relay_delay_ms"] == 2 * base["workload"]["tx_relay_delay_ms"]
    assert sc["pools"]["miner"] == base["pools"]["miner"]
    assert base["workload"]["selfish_fraction"] == 0.05


def test_descent_on_a_synthetic_response():
    # shares move linearly with the knobs; the optimum sits on the grid
    def measure(sc):
        f = sc["workload"]["selfish_fraction"]
        lat = sc["topology"]["latency_scale"]
        later = 0.001 * lat
        return {"stale": 1 - f - later, "selfish": f, "later": later}, 100

    calls = []
    grid = {"selfish_fraction": (0.1, 0.2, 0.3), "latency_scale": (1.0, 2.0, 4.0)}
    target = CalibrationTarget(0.696, 0.3, 0.004)
    res = calibrate(small_bcb(1), target, budget=50, grid=grid,
                    measure=lambda sc: calls.append(1) or measure(sc))
    assert res.knobs == {"selfish_fraction": 0.3, "latency_scale": 4.0}
    assert res.distance < 1e-9
    assert res.runs == len(calls) == len(res.history)
    json.loads(res.to_json())


def test_budget_is_respected():
    calls = []

    def measure(sc):
        calls.append(1)
        return {"stale": 1.0, "selfish": 0.0, "later": 0.0}, 10

    res = calibrate(small_bcb(1), budget=3, measure=measure)
    assert len(calls) == 3 and res.runs == 3
    with pytest.raises(ValueError):
        calibrate(small_bcb(1), budget=0, measure=measure)


def test_runs_without_misses_never_win():
    seen = iter([({"stale": 0.0, "selfish": 0.0, "later": 0.0}, 0)] + [
        ({"stale": 0.5, "selfish": 0.5, "later": 0.0}, 5)] * 100)
    res = calibrate(small_bcb(1), budget=5, grid={"selfish_fraction": (0.1, 0.2)},
                    measure=lambda sc: next(seen))
    assert res.distance < float("inf") and res.knobs["selfish_fraction"] != 0.05


def test_no_generators_for_selfish_or_later():
    for seed in (1, 2):
        sc = apply_knobs(small_bcb(seed), {"selfish_fraction": 0.0, "latency_scale": 0.0})
        shares, n = measure_shares(sc)
        assert n > 0 and shares == {"stale": 1.0, "selfish": 0.0, "later": 0.0}
        no_selfish, _ = measure_shares(apply_knobs(small_bcb(seed), {"selfish_fraction": 0.0}))
        assert no_selfish["selfish"] == 0.0


def _mean_share(knobs, cls, seeds=(1, 2, 3)):
    return float(np.mean([measure_shares(apply_knobs(small_bcb(s), knobs))[0][cls] for s in seeds]))


@pytest.mark.parametrize("cls, low, high", [
    ("selfish", {"selfish_fraction": 0.02}, {"selfish_fraction": 0.2}),
    ("stale", {"relay_cap_scale": 1.0}, {"relay_cap_scale": 0.25}),
    ("later", {"latency_scale": 0.5}, {"latency_scale": 4.0}),
])
def test_monotone_responses_over_seeds(cls, low, high):
    assert _mean_share(high, cls) >= _mean_share(low, cls)


def test_grid_covers_the_three_knobs():
    assert set(DEFAULT_GRID) == {"selfish_fraction", "relay_cap_scale", "latency_scale"}


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("HCBLAB_SLOW") != "1", reason="set HCBLAB_SLOW=1 to recalibrate")
def test_recalibration_reproduces_golden():
    base = scenario.load(str(DATA.joinpath("calibration_base.json")))
    golden = json.loads(DATA.joinpath("calibration_report.json").read_text())
    res = calibrate(base, budget=50)
    assert res.knobs == golden["knobs"]
    assert res.distance <= 0.15
    assert json.loads(res.to_json()) == golden
