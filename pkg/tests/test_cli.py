import json
from importlib import resources

import numpy as np
import pytest

from hcblab import cli, netsim, scenario
from hcblab.netsim import ConfigError
from hcblab.prediction import reference_model, sample_generative, write_dataset
from hcblab.protocol import ProtocolKind

SMALL = str(resources.files("hcblab").joinpath("data/scenarios/small.json"))


def write(tmp_path, doc, name="sc.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc, indent=2))
    return str(p)


# ----- scenario loading -----

def test_defaults_validate_and_carry_reference_values():
    d = scenario.load_defaults()
    scenario.validate(d)
    assert d["pools"]["miner"] == {"pending_cap": 5120, "queue_cap": 1024, "secondary_cap": 200000}
    assert d["miner_model"]["mean_interval_ms"] == 13000 and d["miner_model"]["block_cap"] == 200


def test_partial_scenario_merges_over_defaults():
    sc = scenario.parse(json.dumps({"workload": {"tx_rate": 3.0}, "topology": {"n": 10, "degree": 4}}))
    assert sc["workload"]["tx_rate"] == 3.0 and sc["workload"]["accounts"] == 2000
    assert sc["topology"]["generator"] == "random_regular"
    b = scenario.build(sc)
    assert len(b.topology.nodes) == 10 and b.workload.tx_rate == 3.0


def test_explicit_edges_replace_generator():
    doc = {"topology": {"nodes": 3, "edges": [{"a": 0, "b": 1, "latency_ms": 5, "bandwidth_Bps": 1e6},
                                              {"a": 1, "b": 2, "latency_ms": 5, "bandwidth_Bps": 1e6}]},
           "roles": {"miners": [0], "selfish": []},
           "overrides": [{"id": 2, "kind": "BHP", "hcb_capable": False}]}
    b = scenario.build(scenario.parse(json.dumps(doc)))
    assert [n.miner for n in b.topology.nodes] == [True, False, False]
    assert b.topology.nodes[2].kind is ProtocolKind.BHP and not b.topology.nodes[2].hcb_capable


def test_unknown_key_reports_line_and_field(tmp_path):
    text = '{\n  "seed": 1,\n  "workload": {\n    "tx_rat": 3\n  }\n}\n'
    with pytest.raises(ConfigError) as exc:
        scenario.load(write(tmp_path, text))
    assert "sc.json:4: field workload:" in str(exc.value) and "tx_rat" in str(exc.value)


@pytest.mark.parametrize("doc, needle", [
    ('{"seed": -1}', "field seed"),
    ('{"protocol": "XYZ"}', "field protocol"),
    ('{"workload": {"selfish_fraction": 2}}', "field workload/selfish_fraction"),
    ('{"roles": {"miners": 99}}', "roles/miners"),
    ('{"topology": {"n": 5, "degree": 3}}', "regular"),
    ('{"seed": 1,,}', ":1:"),
    ('[1]', "JSON object"),
])
def test_bad_scenarios(tmp_path, doc, needle):
    with pytest.raises(ConfigError, match=needle):
        scenario.build(scenario.load(write(tmp_path, doc)))


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        scenario.load(tmp_path / "absent.json")


# ----- exit codes -----

def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["run", write(tmp_path, '{"seed": "x"}'), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err
    assert cli.main(["model", "--k-min", "0"]) == 2

    def broken(*a, **k):
        raise AssertionError("pool invariant")

    monkeypatch.setattr(netsim, "run", broken)
    assert cli.main(["run", SMALL, "--out", str(tmp_path), "--no-timestamp"]) == 3
    assert "invariant violation" in capsys.readouterr().err


def test_run_writes_outputs_and_is_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert cli.main(["run", SMALL, "--out", str(d), "--no-timestamp", "--samples", "--debug"]) == 0
        outs.append({f: (d / f).read_bytes() for f in ("events.jsonl", "report.csv", "report.json",
                                                       "samples.jsonl")})
    assert outs[0] == outs[1]
    assert capsys.readouterr().out.startswith("section")
    stamped = tmp_path / "c"
    cli.main(["run", SMALL, "--out", str(stamped), "--format", "json"])
    assert (stamped / "report.csv").read_text().startswith("# generated ")
    assert "_generated" in json.loads((stamped / "report.json").read_text())


# ----- model -----

def test_model_table(capsys):
    assert cli.main(["model", "--no-timestamp"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split(",")[0].strip() == "k" and len(lines) == 34
    k1 = [float(x) for x in lines[1].split(",")]
    k33 = [float(x) for x in lines[-1].split(",")]
    assert k1[0] == 1 and abs(k1[1] - 0.0081) < 5e-4 and abs(k1[2] - 15.3) < 0.1
    assert k33[0] == 33 and abs(k33[1] - 0.1977) < 3e-3 and abs(k33[2] - 12.3) < 0.1


def test_model_zero_block_size_and_json(capsys, tmp_path):
    cli.main(["model", "--M", "0", "--k-max", "3", "--format", "json", "--out", str(tmp_path / "m.json")])
    rows = json.loads(capsys.readouterr().out)
    assert [r["tps"] for r in rows] == [0.0, 0.0, 0.0]
    assert json.loads((tmp_path / "m.json").read_text()) == rows


# ----- train -----

def test_train_round_trip(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    write_dataset(data, sample_generative(reference_model(), 3000, np.random.default_rng(0)))
    args = ["train", str(data), "--out", str(tmp_path / "m"), "--no-timestamp", "--seed", "1"]
    assert cli.main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["train"] == 2400 and first["test"] == 600
    assert first["precision"] > 0.5 and first["recall"] > 0.5
    model_bytes = (tmp_path / "m" / "model.json").read_bytes()
    assert cli.main(args) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert (tmp_path / "m" / "model.json").read_bytes() == model_bytes


def test_train_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"label": "present"}\n')
    assert cli.main(["train", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["train", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2
    data = tmp_path / "d.jsonl"
    write_dataset(data, sample_generative(reference_model(), 50, np.random.default_rng(0)))
    assert cli.main(["train", str(data), "--split", "1.5", "--out", str(tmp_path)]) == 2


def test_trained_model_feeds_a_scenario(tmp_path):
    data = tmp_path / "d.jsonl"
    write_dataset(data, sample_generative(reference_model(), 2000, np.random.default_rng(0)))
    cli.main(["train", str(data), "--out", str(tmp_path / "m"), "--no-timestamp"])
    sc = scenario.parse(json.dumps({"predictor": {"kind": "file", "path": str(tmp_path / "m" / "model.json")}}))
    assert scenario.build_predictor(sc).predict_missing([]) == []
    with pytest.raises(ConfigError):
        scenario.build_predictor(scenario.parse('{"predictor": {"kind": "file"}}'))


# ----- compare -----

def test_compare_rows_and_files(tmp_path, capsys):
    args = ["compare", SMALL, "--protocols", "BCB,HCB,bhp", "--out", str(tmp_path), "--no-timestamp"]
    assert cli.main(args) == 0
    out = capsys.readouterr().out
    rows = json.loads((tmp_path / "compare.json").read_text())["rows"]
    assert [r["protocol"] for r in rows] == ["BCB", "HCB", "BHP"]
    assert rows[2]["matched_block_prob"] is None and rows[2]["entries_block_q0.5"] is None
    assert rows[1]["matched_block_prob"] >= rows[0]["matched_block_prob"]
    assert len(out.splitlines()) == 4
    for k in ("BCB", "HCB", "BHP"):
        assert (tmp_path / k / "report.csv").exists()
    assert cli.main(["compare", SMALL, "--protocols", "XCB", "--out", str(tmp_path)]) == 2


def test_compare_uses_one_workload_stream(monkeypatch, tmp_path):
    seen = []
    original = netsim.World.__init__

    def spy(self, *a, **k):
        original(self, *a, **k)
        seen.append(tuple((e.t, e.tx.tx_hash) for e in self.txs))

    monkeypatch.setattr(netsim.World, "__init__", spy)
    cli.main(["compare", SMALL, "--protocols", "BCB,SCB,PCB", "--out", str(tmp_path), "--no-timestamp"])
    assert len(seen) == 3 and len(set(seen)) == 1
