"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line."""

import hashlib
import itertools
import json
import math
import random
import time
from importlib import resources

import numpy as np
import pytest

from hcblab import analytics, cli, netsim, scenario
from hcblab.core import GENESIS, make_block, to_compact
from hcblab.netsim import MinerModel, Workload
from hcblab.prediction import EPSILON, MISSING, REFERENCE_CONFUSION, ConstantPredictor, FeatureVector, classify_batch, reference_model
from hcblab.protocol import COMBINATION_CAP, NeedTxs, ProtocolKind, Reconstructed, identify, resolve
from hcblab.secondary_pool import ShortIdMap
from conftest import record
from helpers import (
    collision_pairs,
    line_topology,
    package_snapshot,
    profitable_moves_left,
    random_triple,
    run_oracle_restore,
    run_package_restore,
    tx,
)
from oracles import direct_decision

SCENARIOS = resources.files("hcblab").joinpath("data/scenarios")
TARGET = {"stale": 0.6745, "selfish": 0.3220, "later": 0.0035}


def _load(name):
    return scenario.load(str(SCENARIOS.joinpath(name)))


@pytest.fixture(scope="module")
def calibrated_runs():
    """One run per compact protocol on the calibrated scenario: kind -> (events, seconds)."""
    sc = _load("calibrated.json")
    out = {}
    for kind in ("BCB", "SCB", "PCB", "HCB"):
        b = scenario.build({**sc, "protocol": kind})
        t0 = time.perf_counter()
        res = netsim.run(b.topology, b.workload, b.miner, b.until, b.seed, b.predictor)
        out[kind] = (res.events, time.perf_counter() - t0, res.stats)
    return out


def test_criterion_1_analytic_model(capsys):
    cli.main(["model", "--format", "json", "--no-timestamp"])
    rows = {r["k"]: r for r in json.loads(capsys.readouterr().out)}
    p1, p33, t1, t33 = rows[1]["p_empty"], rows[33]["p_empty"], rows[1]["tps"], rows[33]["tps"]
    ok = (abs(p1 - 0.00811) <= 0.0005 and abs(p33 - 0.1977) <= 0.003
          and abs(t1 - 15.3) <= 0.1 and abs(t33 - 12.3) <= 0.1)
    assert record("1", "analytic model", ok,
                  f"p(1)={p1:.6f} p(33)={p33:.6f} TPS(1)={t1:.4f} TPS(33)={t33:.4f}")


def test_criterion_2_empty_block_monte_carlo():
    miner = MinerModel(mean_interval_ms=13000, reset_ms=60.0, assemble_ms=70.0)
    t0 = time.perf_counter()
    res = netsim.run(line_topology(2, ProtocolKind.BCB), Workload(tx_rate=0, duration_ms=0), miner,
                     until=13000 * 10_400, seed=2)
    secs = time.perf_counter() - t0
    mined = [e["forced_empty"] for e in res.events if e["event"] == "block_mined"]
    p = -math.expm1(-0.01)
    frac = float(np.mean(mined))
    sigma = math.sqrt(p * (1 - p) / len(mined))
    ok = len(mined) >= 10_000 and abs(frac - p) <= 3 * sigma and secs < 10
    assert record("2", "empty-block Monte Carlo", ok,
                  f"{len(mined)} races, fraction {frac:.5f} vs {p:.5f} (3 sigma {3 * sigma:.5f}), {secs:.1f}s")


def test_criterion_3_classifier_fidelity():
    rnd = random.Random(20)
    feats = [FeatureVector(rnd.uniform(0, 200), rnd.uniform(0, 200), rnd.random(), rnd.random() < 0.5)
             for _ in range(10_000)]
    pred = classify_batch(reference_model(), feats)
    compared = agree = 0
    for f, p in zip(feats, pred):
        label, floored = direct_decision(f.fee_gwei, f.age_s, f.rank_ratio, f.present_at_sender, EPSILON)
        if floored:
            continue
        compared += 1
        agree += (label == MISSING) == bool(p)
    precision, recall = REFERENCE_CONFUSION.precision, REFERENCE_CONFUSION.recall
    ok = (agree == compared > 0 and precision == 9385 / 9868 and recall == 9385 / 21567
          and round(precision, 3) == 0.951 and round(recall, 3) == 0.435)
    assert record("3", "classifier fidelity", ok,
                  f"{agree}/{compared} unfloored vectors agree; precision {precision:.4f}, recall {recall:.4f}")


@pytest.fixture(scope="module")
def restore_runs():
    rows = []
    t0 = time.perf_counter()
    for seed in range(1000):
        triple = random_triple(seed)
        pool, sp, _, report = run_package_restore(triple)
        rows.append((triple, pool, sp, report))
    secs = time.perf_counter() - t0
    return rows, secs


def test_criterion_4a_restore_equals_interpreter(restore_runs):
    rows, secs = restore_runs
    mismatches = 0
    for triple, pool, sp, report in rows:
        st = run_oracle_restore(triple)
        if package_snapshot(pool, sp) != st.snapshot() or report.iterations != st.iterations:
            mismatches += 1
    ok = mismatches == 0 and secs < 5
    assert record("4a", "restore oracle equivalence", ok,
                  f"{len(rows) - mismatches}/{len(rows)} triples identical, {secs:.2f}s")


def test_criterion_4b_no_profitable_move_left(restore_runs):
    rows, _ = restore_runs
    bad = [i for i, (_, pool, sp, _) in enumerate(rows) if profitable_moves_left(pool, sp)]
    capped = sum(1 for i in bad if rows[i][3].iterations >= len(rows[i][0][3]))
    assert record("4b", "restore post-state invariant", not bad,
                  f"{len(bad)}/{len(rows)} triples keep a profitable continuous move "
                  f"({capped} of them stopped by the iteration cap)")


def _body_hash(txs):
    return hashlib.sha256(b"".join(t.tx_hash for t in txs)).digest()


def test_criterion_5_collision_resolution():
    pairs = collision_pairs()
    rnd = random.Random(5)
    wrong = trials = 0
    for trial in range(300):
        k = rnd.randint(1, len(pairs))
        chosen = rnd.sample(pairs, k)
        winners = [p[rnd.randrange(2)] for p in chosen]
        filler = [tx(5000 + trial, n, tag=n) for n in range(rnd.randint(0, 4))]
        body = winners + filler
        rnd.shuffle(body)
        blk = make_block(GENESIS, body, 1, 0)
        resident = [t for p in chosen for t in p] + filler
        drop_one = bool(filler) and rnd.random() < 0.3
        if drop_one:
            resident.remove(filler[0])
        idx = ShortIdMap()
        for t in resident:
            idx.add(t)
        st = identify(idx, to_compact(blk))
        res = resolve(st)
        collided = {p[0].short_id for p in chosen}
        if drop_one:
            expect = collided | {filler[0].short_id}
            ok = isinstance(res, NeedTxs) and set(res.sids) == expect
        elif 2 ** k <= COMBINATION_CAP:
            # brute force every combination against the header digest
            sids = [p[0].short_id for p in chosen]
            found = []
            for combo in itertools.product(*chosen):
                pick = dict(zip(sids, combo))
                cand = [pick.get(t.short_id, t) for t in body]
                if _body_hash(cand) == blk.header.body_hash:
                    found.append(cand)
            ok = isinstance(res, Reconstructed) and found == [list(res.block.body)]
        else:
            ok = isinstance(res, NeedTxs) and set(res.sids) == collided
        trials += 1
        wrong += not ok
    assert record("5", "collision resolution", wrong == 0, f"{trials - wrong}/{trials} corpora resolved as the oracle")


def test_criterion_6_protocol_ordering(calibrated_runs):
    m = {k: analytics.matched_metrics(ev)["matched_block_prob"] for k, (ev, _, _) in calibrated_runs.items()}
    secs = {k: s for k, (_, s, _) in calibrated_runs.items()}
    txs = calibrated_runs["BCB"][2]["txs"]
    ok = (m["HCB"] > m["PCB"] > m["BCB"] and m["HCB"] > m["SCB"] > m["BCB"]
          and m["HCB"] >= 0.80 and m["BCB"] <= 0.35 and max(secs.values()) < 120)
    detail = " ".join(f"{k}={m[k]:.3f}({secs[k]:.0f}s)" for k in ("HCB", "PCB", "SCB", "BCB"))
    assert record("6", "protocol ordering", ok, f"{detail}, {txs} txs")


def test_criterion_7_propagation_decomposition(calibrated_runs):
    fits = {k: analytics.propagation_fit(ev) for k, (ev, _, _) in calibrated_runs.items()}
    worst = max(f.relative_residual for f in fits.values())
    ok = all(f is not None for f in fits.values()) and worst <= 0.05
    assert record("7", "propagation decomposition", ok, f"worst relative residual {worst:.2e}")


def test_criterion_8_miss_taxonomy(calibrated_runs):
    records = analytics.miss_records(calibrated_runs["BCB"][0])
    assert records
    # exactly one class per miss
    classes = [analytics.classify_miss(r) for r in records]
    total = all(sum(c is k for k in analytics.MissClass) == 1 for c in classes)
    shares = analytics.miss_shares(records)
    dist = sum(abs(shares[k] - v) for k, v in TARGET.items())
    ok = total and all(shares[k] > 0 for k in TARGET) and dist <= 0.15
    detail = ", ".join(f"{k} {shares[k]:.4f}" for k in TARGET)
    assert record("8", "miss taxonomy", ok, f"{len(records)} misses: {detail}; L1 distance {dist:.4f}")


def test_criterion_9_degeneration():
    base = _load("small.json")
    same = 0
    seeds = (1, 2, 3)
    for seed in seeds:
        digests = []
        for kind in ("BCB", "HCB"):
            b = scenario.build({**base, "protocol": kind, "seed": seed})
            if kind == "HCB":
                for n in b.topology.nodes:
                    n.secondary_cap = 0
            res = netsim.run(b.topology, b.workload, b.miner, b.until, b.seed, ConstantPredictor(False), trace=True)
            digests.append((res.trace_digest(), len(res.trace)))
        same += digests[0] == digests[1]
    assert record("9", "HCB degenerates to BCB", same == len(seeds),
                  f"{same}/{len(seeds)} seeds give byte-identical message traces")


def test_criterion_10_determinism(tmp_path):
    names = sorted(p.name for p in SCENARIOS.iterdir() if p.name.endswith(".json")
                   and p.name != "calibration_report.json")
    identical = []
    for name in names:
        outs = []
        for rep in ("a", "b"):
            d = tmp_path / name / rep
            code = cli.main(["run", str(SCENARIOS.joinpath(name)), "--out", str(d), "--no-timestamp"])
            assert code == 0
            outs.append([(d / f).read_bytes() for f in ("report.csv", "report.json", "events.jsonl")])
        identical.append(outs[0] == outs[1])
    assert record("10", "determinism", all(identical),
                  f"{sum(identical)}/{len(names)} shipped scenarios byte-identical ({', '.join(names)})")
