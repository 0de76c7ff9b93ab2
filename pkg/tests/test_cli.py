import json
from pathlib import Path

from hearth.cli import main

SCENARIOS = Path(__file__).parent.parent / "scenarios"


def test_sim_run_writes_trace_and_report(tmp_path, capsys):
    trace = tmp_path / "out.jsonl"
    report = tmp_path / "report.json"
    code = main(["sim", "run", str(SCENARIOS / "smoke_home.json"),
                 "--trace", str(trace), "--report", str(report), "--assert"])
    assert code == 0
    assert trace.exists() and trace.stat().st_size > 0
    doc = json.loads(report.read_text())
    assert doc["delivery"]["ratio"] >= 0.95
    assert "all scenario assertions passed" in capsys.readouterr().err


def test_sim_run_same_seed_identical_traces(tmp_path):
    t1, t2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for t in (t1, t2):
        assert main(["sim", "run", str(SCENARIOS / "compare_mac_4.json"),
                     "--trace", str(t), "--report", str(tmp_path / "r.json")]) == 0
    assert t1.read_bytes() == t2.read_bytes()


def test_malformed_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["sim", "run", str(bad)]) == 2
    assert "invalid scenario" in capsys.readouterr().err


def test_schema_violation_exits_2_with_field_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1,
                               "devices": [{"id": 1, "kind": "starship"}]}))
    assert main(["sim", "run", str(bad)]) == 2
    assert "devices[0].kind" in capsys.readouterr().err


def test_missing_file_exits_2():
    assert main(["sim", "run", "/nonexistent/path.json"]) == 2


def test_failed_assertion_exits_4(tmp_path, capsys):
    doc = json.loads((SCENARIOS / "smoke_home.json").read_text())
    doc["asserts"] = {"cmd_p99_max_s": 0.000001}
    impossible = tmp_path / "impossible.json"
    impossible.write_text(json.dumps(doc))
    assert main(["sim", "run", str(impossible), "--assert"]) == 4
    assert "ASSERTION FAILED" in capsys.readouterr().err


def test_compare_mac_table(capsys):
    code = main(["sim", "compare-mac", str(SCENARIOS / "compare_mac_4.json"),
                 "--modes", "selforg,naive"])
    assert code == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.strip()]
    assert lines[0].split()[:2] == ["mode", "delivery"]
    table = {l.split()[0]: float(l.split()[1]) for l in lines[1:]}
    assert table["selforg"] == 1.0
    assert table["naive"] < 0.9


def test_compare_mac_single_sender_equal(tmp_path, capsys):
    doc = json.loads((SCENARIOS / "compare_mac_4.json").read_text())
    doc["devices"] = doc["devices"][:1]
    one = tmp_path / "one.json"
    one.write_text(json.dumps(doc))
    assert main(["sim", "compare-mac", str(one)]) == 0
    out = capsys.readouterr().out
    table = {l.split()[0]: float(l.split()[1])
             for l in out.splitlines()[1:] if l.strip()}
    assert table["selforg"] == 1.0 and table["naive"] == 1.0


def test_report_energy_table(capsys):
    code = main(["report", "energy", str(SCENARIOS / "battery_profile.json")])
    assert code == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert "lifetime" in lines[0]
    battery_row = next(l for l in lines if l.startswith("dev1"))
    assert "ok" in battery_row
    mains_row = next(l for l in lines if l.startswith("dev2"))
    assert "mains" in mains_row


def test_report_energy_flags_out_of_window(tmp_path, capsys):
    doc = json.loads((SCENARIOS / "battery_profile.json").read_text())
    # reporting every half second burns the battery far below the window
    doc["devices"][0]["report_interval_s"] = 0.5
    doc["devices"][0]["poll_interval_s"] = 0.5
    doc["duration_s"] = 30.0
    hot = tmp_path / "hot.json"
    hot.write_text(json.dumps(doc))
    assert main(["report", "energy", str(hot)]) == 0
    out = capsys.readouterr().out
    assert "OUT OF WINDOW" in out
