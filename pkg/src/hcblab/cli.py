"""Command-line entry point: hcblab {run,model,train,compare,calibrate}."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analytics, calibration, netsim, prediction, scenario
from .netsim import ConfigError
from .protocol import ProtocolError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

COMPARE_METRICS = (
    ("matching", "matched_block_prob"),
    ("matching", "matched_tx_rate"),
    ("block_delay", "mean_ms"),
    ("propagation", "observed_ms"),
    ("propagation", "predicted_ms"),
    ("misses", "count"),
)


def _stamp(args) -> Optional[str]:
    if args.no_timestamp:
        return None
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _write_report(report: analytics.Report, out: Path, stamp: Optional[str], fmt: str) -> str:
    csv_text = report.to_csv()
    payload = report.to_dict()
    if stamp:
        csv_text = f"# generated {stamp}\n" + csv_text
        payload = {"_generated": stamp, **payload}
    json_text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (out / "report.csv").write_text(csv_text)
    (out / "report.json").write_text(json_text)
    return csv_text if fmt == "csv" else json_text


def _load_scenario(args) -> dict:
    sc = scenario.load(args.scenario)
    if args.seed is not None:
        sc["seed"] = args.seed
    if getattr(args, "protocol", None):
        sc["protocol"] = args.protocol
    return sc


def _out_dir(args, sc: dict) -> Path:
    out = Path(args.out or sc["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _simulate(sc: dict, debug: bool, collect_samples: bool = False) -> netsim.SimResult:
    b = scenario.build(sc)
    return netsim.run(b.topology, b.workload, b.miner, b.until, b.seed, b.predictor,
                      debug=debug, collect_samples=collect_samples)


def _samples_to_records(samples: dict) -> list[prediction.LabeledSample]:
    out = []
    for i in range(len(samples["label_present"])):
        f = prediction.FeatureVector(float(samples["fee_gwei"][i]), float(samples["age_s"][i]),
                                     float(samples["rank_ratio"][i]), bool(samples["present_at_sender"][i]))
        label = prediction.PRESENT if samples["label_present"][i] else prediction.MISSING
        out.append(prediction.LabeledSample(f, label))
    return out


# ----- subcommands -----

def cmd_run(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    res = _simulate(sc, args.debug, collect_samples=args.samples)
    (out / "events.jsonl").write_text("".join(line + "\n" for line in res.event_log_lines()))
    if args.samples:
        prediction.write_dataset(out / "samples.jsonl", _samples_to_records(res.samples))
    text = _write_report(analytics.summarize(res.events), out, _stamp(args), args.format)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_model(args) -> int:
    if args.k_min < 1 or args.k_max < args.k_min:
        raise ConfigError("need 1 <= k-min <= k-max")
    model = analytics.EmptyBlockModel(t_g=args.t_g, M=args.M)
    rows = analytics.model_table(model, range(args.k_min, args.k_max + 1))
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = f"{'k':>4},{'p_empty':>12},{'tps':>12}\n" + "".join(
            f"{r['k']:>4},{r['p_empty']:>12.6f},{r['tps']:>12.6f}\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        samples = prediction.read_dataset(args.dataset)
    except OSError as exc:
        raise ConfigError(f"{args.dataset}: cannot read dataset: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < args.split < 1.0:
        raise ConfigError("split must lie strictly between 0 and 1")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    order = rng.permutation(len(samples))
    cut = int(round(args.split * len(samples)))
    train_set = [samples[i] for i in order[:cut]]
    test_set = [samples[i] for i in order[cut:]]
    if not test_set:
        raise ConfigError("held-out split is empty")
    bins = {k: args.bins for k in prediction.CONTINUOUS} if args.bins else None
    try:
        model = prediction.train(train_set, bins=bins)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cm = prediction.evaluate(model, test_set)
    out = Path(args.out or "model_out")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    metrics = {"train": len(train_set), "test": len(test_set), **cm.to_dict()}
    stamp = _stamp(args)
    if stamp:
        metrics["_generated"] = stamp
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    (out / "metrics.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def compare_rows(base: dict, kinds: Sequence[str], debug: bool = False,
                 out: Optional[Path] = None) -> list[dict]:
    rows = []
    for kind in kinds:
        sc = {**base, "protocol": kind}
        res = _simulate(sc, debug)
        rep = analytics.summarize(res.events)
        row = {"protocol": kind}
        for sec, key in COMPARE_METRICS:
            row[key] = rep.get(sec, key)
        for tag in ("entries_block", "full_block"):
            for q in (0.5, 0.9):
                try:
                    row[f"{tag}_q{q:g}"] = rep.get(f"size_{tag}", f"q{q:g}")
                except KeyError:
                    row[f"{tag}_q{q:g}"] = None
        if out is not None:
            d = out / kind
            d.mkdir(parents=True, exist_ok=True)
            (d / "report.csv").write_text(rep.to_csv())
            (d / "report.json").write_text(rep.to_json())
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    kinds = [k.strip().upper() for k in args.protocols.split(",") if k.strip()]
    for k in kinds:
        if k not in scenario.KINDS:
            raise ConfigError(f"unknown protocol {k!r}; expected one of {scenario.KINDS}")
    rows = compare_rows(sc, kinds, args.debug, out)
    cols = list(rows[0])
    stamp = _stamp(args)
    csv_text = ",".join(f"{c:>22}" for c in cols) + "\n" + "".join(
        ",".join(f"{analytics._fmt(r[c]):>22}" for c in cols) + "\n" for r in rows)
    payload = {"rows": rows}
    if stamp:
        csv_text = f"# generated {stamp}\n" + csv_text
        payload["_generated"] = stamp
    json_text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (out / "compare.csv").write_text(csv_text)
    (out / "compare.json").write_text(json_text)
    sys.stdout.write(csv_text if args.format == "csv" else json_text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    res = calibration.calibrate(sc, budget=args.budget)
    tuned = {**res.scenario, "name": sc.get("name", "scenario") + "_tuned"}
    (out / "tuned_scenario.json").write_text(json.dumps(tuned, indent=2, sort_keys=True) + "\n")
    report = res.report()
    stamp = _stamp(args)
    if stamp:
        report["_generated"] = stamp
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    (out / "calibration.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ----- parser -----

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default=None, help="output directory (or file for model)")
    p.add_argument("--no-timestamp", action="store_true", help="omit the generated-at header")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="stdout format")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hcblab", description="Hybrid compact block simulation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario and write events + report")
    p.add_argument("scenario")
    p.add_argument("--protocol", choices=scenario.KINDS, default=None)
    p.add_argument("--samples", action="store_true", help="also write classifier samples")
    p.add_argument("--debug", action="store_true", help="full invariant checks after every block")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("model", help="empty-block probability and TPS table")
    p.add_argument("--k-min", type=int, default=1, help="smallest pool multiple")
    p.add_argument("--k-max", type=int, default=33, help="largest pool multiple")
    p.add_argument("--t-g", type=float, default=13000.0, help="mean block interval, ms")
    p.add_argument("--M", type=int, default=200, help="transactions per full block")
    _common(p)
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("train", help="train and evaluate the histogram classifier")
    p.add_argument("dataset")
    p.add_argument("--split", type=float, default=0.8, help="training fraction")
    p.add_argument("--bins", type=int, default=None, help="bins per continuous feature")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="run one scenario under several protocols")
    p.add_argument("scenario")
    p.add_argument("--protocols", default="BHP,BCB,SCB,PCB,HCB", help="comma-separated protocol list")
    p.add_argument("--debug", action="store_true", help="full invariant checks after every block")
    _common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="tune workload knobs toward the miss-class targets")
    p.add_argument("scenario")
    p.add_argument("--protocol", choices=scenario.KINDS, default=None)
    p.add_argument("--budget", type=int, default=50, help="maximum simulation runs")
    _common(p)
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AssertionError, ProtocolError) as exc:
        print(f"invariant violation: {exc!r}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
