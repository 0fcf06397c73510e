import csv
import io
import json

import pytest

from evbid import cli, harness, scenario


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_doc(tmp_path, doc, name="sc.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=1))
    return path


def small_doc(**params):
    doc = {
        "name": "small",
        "params": {"horizon": 24, "V": 2.0, "samples": 8, **params},
        "network": {"buses": 2, "lines": [{"from": 0, "to": 1}],
                    "generators": [{"bus": 0, "a": 0.5, "b": 1.0}],
                    "loads": [{"bus": 1, "kw": 5.0}]},
        "fleet": {"aggregators": [{"name": "A", "bus": 1, "groups": [{"duration": 12}],
                                   "evs": [{"id": "e", "arrival": 1, "departure": 13,
                                            "energy_arrival": 5.0, "energy_target": 9.0,
                                            "energy_max": 20.0, "power_cap": 7.0}]}]},
    }
    return doc


def test_run_toy_writes_two_files(tmp_path, capsys):
    code, out, _ = run(capsys, "run", "toy", "--out", str(tmp_path / "o"))
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["metrics.csv", "summary.json"]
    rows = list(csv.reader(io.StringIO((tmp_path / "o" / "metrics.csv").read_text())))
    assert tuple(rows[0]) == harness.METRIC_COLUMNS
    assert len(rows) == 1 + 48 * 2
    assert "seed 0" in out


def test_b1_not_above_online(tmp_path, capsys):
    totals = {}
    for strat in ("online", "b1"):
        assert run(capsys, "run", "toy", "--strategy", strat, "--out", str(tmp_path / strat))[0] == 0
        totals[strat] = json.loads((tmp_path / strat / "summary.json").read_text())["total_cost"]
    assert totals["b1"] <= totals["online"] + 1e-9


def test_malformed_scenario_is_line_anchored(tmp_path, capsys):
    doc = small_doc()
    text = json.dumps(doc, indent=1).replace('"power_cap": 7.0', '"power_cap": -7.0')
    path = tmp_path / "bad.json"
    path.write_text(text)
    code, _, err = run(capsys, "run", str(path), "--out", str(tmp_path / "o"))
    assert code == 2
    line = next(i for i, l in enumerate(text.splitlines(), 1) if "power_cap" in l)
    assert f"bad.json:{line}:" in err


def test_broken_json_reports_line(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n "name": "x",\n "params": {,\n}\n')
    code, _, err = run(capsys, "validate", str(path))
    assert code == 2
    assert "broken.json:3:" in err


def test_unknown_key_rejected(tmp_path, capsys):
    doc = small_doc()
    doc["params"]["colour"] = "red"
    code, _, err = run(capsys, "run", str(write_doc(tmp_path, doc)), "--out", str(tmp_path / "o"))
    assert code == 2 and "colour" in err


def test_zero_alpha_rejected(tmp_path, capsys):
    doc = small_doc(alpha=0.0)
    assert run(capsys, "validate", str(write_doc(tmp_path, doc)))[0] == 2
    doc = small_doc()
    doc["fleet"]["aggregators"][0]["groups"][0]["alpha"] = 0
    assert run(capsys, "validate", str(write_doc(tmp_path, doc)))[0] == 2


def test_infeasible_market_exit(tmp_path, capsys):
    doc = small_doc()
    doc["network"]["generators"][0]["pmax"] = 1.0
    code, _, err = run(capsys, "run", str(write_doc(tmp_path, doc)), "--out", str(tmp_path / "o"))
    assert code == 3
    assert "slot 0" in err


def test_io_error_exit(tmp_path, capsys):
    assert run(capsys, "run", str(tmp_path / "missing.json"))[0] == 4
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(capsys, "run", "toy", "--out", str(blocker / "sub"))[0] == 4


def test_outputs_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "run", "toy", "--out", str(tmp_path / d))[0] == 0
    for name in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_echoed_and_changes_generated_fleet(tmp_path, capsys):
    doc = scenario.synthetic_document(1, n_bus=3, n_aggregators=1, groups_per_agg=(2,), horizon=24,
                                      per_group=(2, 4), name="gen")
    path = write_doc(tmp_path, doc)
    summaries = []
    for seed in (5, 6):
        assert run(capsys, "run", str(path), "--seed", str(seed), "--out", str(tmp_path / str(seed)))[0] == 0
        summaries.append(json.loads((tmp_path / str(seed) / "summary.json").read_text()))
    assert [s["seed"] for s in summaries] == [5, 6]
    assert scenario.load(path, seed=5).aggregators[0].evs != scenario.load(path, seed=6).aggregators[0].evs


def test_expand_round_trip(tmp_path, capsys):
    doc = scenario.synthetic_document(2, n_bus=3, n_aggregators=1, groups_per_agg=(2,), horizon=24,
                                      per_group=(2, 4), name="gen")
    src = write_doc(tmp_path, doc)
    out = tmp_path / "expanded.json"
    assert run(capsys, "expand", str(src), str(out))[0] == 0
    expanded = json.loads(out.read_text())
    assert "generate" not in expanded["fleet"]["aggregators"][0]
    for d, path in (("orig", src), ("exp", out)):
        assert run(capsys, "run", str(path), "--out", str(tmp_path / d))[0] == 0
    assert (tmp_path / "orig" / "metrics.csv").read_bytes() == (tmp_path / "exp" / "metrics.csv").read_bytes()


def test_compare_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "compare", "toy", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["algorithm"] for r in rows] == ["proposed", "B1", "B2", "B3"]
    assert float(rows[1]["relative_value"]) == pytest.approx(1.0)
    assert (tmp_path / "compare.csv").read_text() == out


def test_compare_zero_ev(tmp_path, capsys):
    doc = small_doc()
    doc["fleet"]["aggregators"][0]["evs"] = []
    code, out, _ = run(capsys, "compare", str(write_doc(tmp_path, doc)))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len({(r["total_cost"], r["relative_value"]) for r in rows}) == 1


def test_validate_toy_passes(capsys):
    code, out, _ = run(capsys, "validate", "toy")
    assert code == 0
    assert "FAIL" not in out and out.count("PASS") == 6


def test_validate_fuzz(capsys):
    code, out, _ = run(capsys, "validate", "--fuzz", "3", "--no-offline")
    assert code == 0
    assert "3 scenario(s), 0 failed" in out


def test_validate_needs_target(capsys):
    assert run(capsys, "validate")[0] == 2


def test_sweep(tmp_path, capsys):
    code, out, _ = run(capsys, "run", "toy", "--sweep", "V=1,4", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [float(r["V"]) for r in rows] == [1.0, 4.0]
    with pytest.raises(SystemExit):
        cli.main(["run", "toy", "--sweep", "eta=1"])
    with pytest.raises(SystemExit):
        cli.main(["run", "toy", "--sweep", "V=0"])


def test_list(capsys):
    code, out, _ = run(capsys, "list")
    assert code == 0
    assert set(out.split()) >= {"toy", "paper-desk", "desk-30bus"}
