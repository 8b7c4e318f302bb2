import csv
import json

import numpy as np
import pytest

from urbanmpc import cli
from urbanmpc.planner import PlannerConfig
from urbanmpc.simulator import LOG_COLUMNS, Scenario, SimLog
from urbanmpc.vehicle import VehicleParams


def short_scenario(tmp_path, **overrides):
    doc = {"name": "short", "road": {"straight": {"length": 200.0, "left": 5.5, "right": -2.0}},
           "ego": {"s": 5.0, "Vx": 10.0, "Tr": 12.0}, "commands": [{"v_ref": 10.0}],
           "duration": 0.5, "perceived_horizon": 60.0}
    doc.update(overrides)
    path = tmp_path / f"{doc['name']}.json"
    path.write_text(json.dumps(doc))
    return str(path)


def planner_file(tmp_path, **overrides):
    doc = {**PlannerConfig(workers=1).to_dict(), **overrides}
    path = tmp_path / "planner.json"
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_self_test_passes(capsys):
    assert cli.main(["--mode", "self-test"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


@pytest.mark.parametrize("writer", [
    lambda p: None,                                  # missing file
    lambda p: p.write_text("{not json"),
    lambda p: p.write_text(json.dumps({"name": "x", "colour": "red"})),
])
def test_bad_scenario_is_a_configuration_error(tmp_path, writer, capsys):
    path = tmp_path / "bad.json"
    writer(path)
    code = cli.main(["--scenario", str(path), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_scenario_is_required_outside_self_test(tmp_path):
    assert cli.main(["--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_unknown_planner_key(tmp_path):
    bad = tmp_path / "p.json"
    bad.write_text(json.dumps({"bogus": 1}))
    code = cli.main(["--scenario", short_scenario(tmp_path), "--planner", str(bad),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG


def test_closed_loop_writes_outputs_and_replays_exactly(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    args = ["--scenario", short_scenario(tmp_path), "--planner", planner_file(tmp_path)]
    assert cli.main(args + ["--out", str(first)]) == cli.EXIT_OK
    for name in ("log.csv", "cycles.csv", "diagnostics.jsonl", "summary.json",
                 "plots/trajectory.csv", "plots/predictions.csv", "plots/states.csv",
                 "plots/cpu_time.csv"):
        assert (first / name).is_file(), name
    summary = json.loads((first / "summary.json").read_text())
    assert summary["result"]["exit_code"] == 0 and summary["result"]["cycles"] == 10
    assert cli.main(["--replay", str(first / "summary.json"), "--out", str(second)]) == 0
    for name in ("log.csv", "cycles.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    header = (first / "log.csv").read_text().splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)


def test_seed_flag_lands_in_summary(tmp_path):
    out = tmp_path / "o"
    cli.main(["--scenario", short_scenario(tmp_path, duration=0.1), "--seed", "42",
              "--planner", planner_file(tmp_path), "--out", str(out)])
    assert json.loads((out / "summary.json").read_text())["config"]["scenario"]["seed"] == 42


def test_collision_exit_code(tmp_path):
    path = short_scenario(tmp_path, obstacles=[{"s0": 9.0, "y0": 0.0, "name": "wall"}])
    code = cli.main(["--scenario", path, "--planner", planner_file(tmp_path),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_COLLISION


def test_exhausted_planner_exit_code(tmp_path):
    # a one-change QP budget cannot absorb a stationary car suddenly in the lane
    path = short_scenario(tmp_path, obstacles=[{"s0": 30.0, "y0": 0.0, "name": "stopped"}],
                          duration=0.3)
    code = cli.main(["--scenario", path, "--planner", planner_file(tmp_path, max_wsr=1),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_EXHAUSTED
    events = json.loads((tmp_path / "o" / "summary.json").read_text())["result"]["events"]
    assert events and events[0]["type"] == "emergency"


def test_strict_timing_exit_code(tmp_path):
    path = short_scenario(tmp_path, duration=0.2)
    args = ["--scenario", path, "--planner", planner_file(tmp_path, cycle_budget=1e-6),
            "--out", str(tmp_path / "o")]
    assert cli.main(args) == cli.EXIT_OK              # overruns only reported
    assert cli.main(args + ["--strict-timing"]) == cli.EXIT_BUDGET


def test_empty_log_gives_header_only_csvs(tmp_path):
    sc = Scenario.from_dict({"name": "e", "road": {"straight": {"length": 50.0}},
                             "ego": {"s": 5.0, "Vx": 5.0}, "commands": [{"v_ref": 5.0}],
                             "duration": 1.0,
                             "obstacles": [{"s0": 30.0, "y0": 0.0, "name": "car"}]})
    log = SimLog(sc, np.zeros((0, len(LOG_COLUMNS))), np.zeros((0, 2)), np.zeros((0, 1, 2)),
                 [], [], VehicleParams())
    paths = cli.emit_plot_data(log, tmp_path)
    for p in paths:
        rows = read_csv(p)
        assert len(rows) == 1 and rows[0]
    assert read_csv(paths[0])[0][-4:] == ["car_s", "car_y", "car_X", "car_Y"]


def test_single_solve_with_qp_dump(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["--scenario", "overtake", "--mode", "single-solve", "--at", "0.5",
                     "--planner", planner_file(tmp_path), "--dump-qp", "--out", str(out)])
    assert code == cli.EXIT_OK
    rows = read_csv(out / "single_solve.csv")
    assert rows[0][:2] == ["planner", "node"]
    assert {r[0] for r in rows[1:]} == {"A", "B", "C"}
    dumps = sorted((out / "qp").glob("*.qp"))
    assert dumps and all(p.stat().st_size > 0 for p in dumps)
    assert json.loads((out / "summary.json").read_text())["result"]["selected"] == "A"


def test_blind_spot_leader_cpu_spike_at_detection(tmp_path):
    out = tmp_path / "bs"
    code = cli.main(["--scenario", "blind_spot", "--out", str(out)])
    assert code == cli.EXIT_OK
    rows = read_csv(out / "plots" / "cpu_time.csv")
    head = rows[0]
    lead = [dict(zip(head, r)) for r in rows[1:] if r[head.index("rank")] == "0"]
    work = {int(r["cycle"]): sum(int(n) for n in r["n_wsr"].split("/")) for r in lead}
    detection = 24
    assert work[detection] == max(work.values())
    before = [work[c] for c in range(detection)]
    assert work[detection] > 5 * max(before)
    spike = {int(r["cycle"]): float(r["qp"]) for r in lead}
    assert spike[detection] > 3 * np.median([spike[c] for c in range(detection)])
