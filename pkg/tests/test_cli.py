import csv
import json
import re

import pytest

from walreplay.cli import main


def test_run_bundled_scenario(tmp_path, capsys):
    assert main(["run", "crash-one-target", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "replayer_delay" in out
    assert (tmp_path / "trace.jsonl").is_file()
    assert list(tmp_path.glob("*.png"))
    with open(tmp_path / "records.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert rows and {"index", "target", "commit_time", "dispatch_time", "apply_time"} <= set(rows[0])


def test_run_scenario_flag_and_file(tmp_path, capsys):
    scn = tmp_path / "one.scn"
    scn.write_text("entries: 5\ntargets: 2\n")
    assert main(["run", "--scenario", str(scn), "--out", str(tmp_path / "o")]) == 0


def test_malformed_scenario_names_line_and_field(tmp_path, capsys):
    scn = tmp_path / "bad.scn"
    scn.write_text("entries: 5\ntargets: lots\n")
    assert main(["run", str(scn), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert f"{scn}:2:" in err and "targets" in err


def test_missing_scenario(capsys):
    assert main(["run", "no-such-thing"]) == 2
    assert main(["run"]) == 2


def test_restart_report_shows_min_plus_one(tmp_path, capsys):
    assert main(["run", "replayer-restart", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    starts = re.findall(r"main fetcher at (\d+) \(min\(last_acks over reachable \[[\d, ]*\]\) \+ 1 = (\d+)\)", out)
    assert len(starts) >= 2
    assert all(a == b for a, b in starts)
    trace = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    restarts = [ev for ev in trace if ev.get("ev") == "restart"]
    assert [int(a) for a, _ in starts] == [ev["start_index"] for ev in restarts]


def test_run_mutant_writes_counterexample(tmp_path, capsys):
    rc = None
    for seed in range(20):
        rc = main(["run", "crash-one-target", "--mutant", "no-fc-transition", "--seed", str(seed),
                   "--out", str(tmp_path / str(seed))])
        if rc == 1:
            assert (tmp_path / str(seed) / "counterexample.json").is_file()
            break
    assert rc == 1


def test_explore_trivial(capsys):
    assert main(["explore", "--nmessages", "1", "--nfailures", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2  # both completion-queue modes
    states = [int(n) for n in re.findall(r"states=(\d+)", out)]
    assert all(0 < n < 100 for n in states)


def test_explore_three_one_single_mode(capsys):
    assert main(["explore", "--nmessages", "3", "--nfailures", "1", "--mode", "flush"]) == 0


def test_explore_mutant_writes_replayable_file(tmp_path, capsys):
    cex = tmp_path / "cex.json"
    rc = main(["explore", "--nmessages", "3", "--nfailures", "1", "--mode", "fail",
               "--mutant", "no-fc-transition", "--out", str(cex)])
    assert rc == 1 and cex.is_file()
    first = capsys.readouterr().out
    assert "FAIL (liveness)" in first
    assert main(["explore", "--replay", str(cex)]) == 1
    assert "liveness" in capsys.readouterr().out


def test_explore_no_term_duplicate(tmp_path, capsys):
    cex = tmp_path / "cex.json"
    rc = main(["explore", "--nmessages", "3", "--nfailures", "2", "--mode", "flush",
               "--mutant", "no-term", "--goal", "duplicate-delivery", "--out", str(cex)])
    assert rc == 1
    assert json.loads(cex.read_text())["prop"] == "duplicate-delivery"


def test_explore_bound_guard(capsys):
    assert main(["explore", "--nmessages", "9"]) == 2
    assert "error" in capsys.readouterr().err


def test_fuzz_small(tmp_path, capsys):
    assert main(["fuzz", "--iterations", "40", "--seed", "3", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "fuzz.json").read_text())
    assert data["iterations"] == 40 and data["failures"] == []


def test_fuzz_failure_prints_case_that_replays(tmp_path, capsys):
    assert main(["fuzz", "--iterations", "400", "--mutant", "no-fc-transition",
                 "--stop-after", "1"]) == 1
    out = capsys.readouterr().out
    case = int(re.search(r"--case (\d+)", out).group(1))
    assert main(["fuzz", "--case", str(case), "--mutant", "no-fc-transition",
                 "--out", str(tmp_path)]) == 1
    assert (tmp_path / "counterexample.json").is_file()


def test_bench_small(tmp_path, capsys):
    assert main(["bench", "--targets", "2", "--entries", "200", "--append-latency-us", "0",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "replayer_delay" in out and "apply_delay" in out and out.rstrip().endswith("PASS")
    assert (tmp_path / "records.csv").is_file() and (tmp_path / "summary.csv").is_file()
    assert list(tmp_path.glob("*.png"))


def test_bench_rejects_bad_config(capsys):
    assert main(["bench", "--targets", "0"]) == 2


def test_unknown_mutant_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["explore", "--mutant", "nope"])
    assert err.value.code == 2
