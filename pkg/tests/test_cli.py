import json

import pytest

from streambatch.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from streambatch.presets import PRESETS, recovery


def out_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_run_preset_prints_summary(capsys):
    assert main(["run", "fig6"]) == EXIT_OK
    summary = out_json(capsys)
    assert summary["jct"] == 8.0 and summary["policy"] == "optimistic"
    assert main(["run", "fig6", "--policy", "pessimistic"]) == EXIT_OK
    assert out_json(capsys)["jct"] == 10.0


def test_run_config_file(tmp_path, capsys):
    path = tmp_path / "rec.json"
    path.write_text(json.dumps(recovery()))
    assert main(["run", str(path)]) == EXIT_OK
    assert out_json(capsys)["rows_out"] == 144


def test_invalid_inputs_exit_2(tmp_path, capsys):
    assert main(["run", "no-such-preset"]) == EXIT_INVALID
    assert main(["run", "fig6", "--policy", "eager"]) == EXIT_INVALID
    assert main([]) == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 2}))
    assert main(["run", str(bad)]) == EXIT_INVALID
    assert "schema_version" in capsys.readouterr().err


def test_partition_larger_than_memory_exits_3(capsys):
    assert main(["run", "recovery", "--mem-limit", "1000"]) == EXIT_RUNTIME
    assert "Unschedulable" in capsys.readouterr().err


def test_trace_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", "recovery", "--seed", "3", "--trace", str(a)]) == EXIT_OK
    assert main(["run", "recovery", "--seed", "3", "--trace", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["schema_version"] == 1 and header["kind"] == "header"
    records = [json.loads(x) for x in lines[1:]]
    assert records[0]["kind"] == "start" and records[-1]["kind"] == "end"
    assert [r["t"] for r in records] == sorted(r["t"] for r in records)


def test_report_file(tmp_path):
    path = tmp_path / "report.json"
    assert main(["run", "fig6", "--report", str(path)]) == EXIT_OK
    report = json.loads(path.read_text())
    assert report["schema_version"] == 1
    assert report["jct"] == 8.0 and report["tasks_launched"] == 6


def test_presets_list_and_show(capsys):
    assert main(["presets", "list"]) == EXIT_OK
    listed = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert listed == list(PRESETS)
    assert main(["presets", "show", "fig6"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["preset"] == "fig6"
    assert main(["presets", "show", "nope"]) == EXIT_INVALID
    assert main(["presets", "show"]) == EXIT_INVALID


def test_solve_and_compare(capsys):
    assert main(["solve", "fig6"]) == EXIT_OK
    assert out_json(capsys)["optimum_ticks"] == 8
    assert main(["solve", "fig6", "--compare"]) == EXIT_OK
    cmp = out_json(capsys)["compare"]
    assert cmp["optimistic"]["gap_percent"] == 0
    assert cmp["pessimistic"]["gap_percent"] > 0


def test_solve_witness_trace(tmp_path):
    path = tmp_path / "w.jsonl"
    assert main(["solve", "fig6", "--trace", str(path)]) == EXIT_OK
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines[0]["producer"] == "solver"
    assert lines[-1]["jct_ticks"] == 8


@pytest.mark.parametrize("argv", [["solve", "fig6", "--horizon", "7"], ["solve", "recovery"]])
def test_solve_failures(argv, capsys):
    expected = EXIT_RUNTIME if "--horizon" in argv else EXIT_INVALID
    assert main(argv) == expected


def test_solve_state_budget_exits_3(capsys):
    assert main(["solve", "memlimit", "--max-states", "10"]) == EXIT_RUNTIME
    assert "solver" in capsys.readouterr().err
