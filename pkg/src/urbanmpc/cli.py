"""Command-line front end: closed-loop runs, single solves and the self-test.

Exit codes: 0 ok, 2 configuration or I/O error, 3 collision or map exit in
plant truth, 4 planner exhaustion (an emergency cycle or a diverged plant),
5 budget violation with ``--strict-timing``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import vehicle as vm
from .planner import PlannerConfig, Planner, budget_violations
from .qp import dump_qp
from .selftest import run_checks
from .simulator import LOG_COLUMNS, Scenario, SimLog, constraint_audit, run_closed_loop
from .vehicle import params_from_dict, params_to_dict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLISION = 3
EXIT_EXHAUSTED = 4
EXIT_BUDGET = 5

MODES = ("closed-loop", "single-solve", "self-test")


class ConfigError(Exception):
    pass


def builtin_names():
    return sorted(p.name[:-5] for p in resources.files("urbanmpc").joinpath("data").iterdir()
                  if p.name.endswith(".json") and p.name not in ("vehicle.json", "planner.json"))


def _read_json(ref: str, kind: str) -> dict:
    """Load ``ref`` as a path, or as the name of a bundled file."""
    path = Path(ref)
    try:
        if path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))
        bundled = resources.files("urbanmpc").joinpath("data") / f"{ref}.json"
        if bundled.is_file():
            return json.loads(bundled.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {kind} {ref!r}: {exc}") from exc
    raise ConfigError(f"{kind} {ref!r} is neither a file nor a bundled name "
                      f"(bundled: {', '.join(builtin_names())})")


def resolve_run(args) -> dict:
    """Effective configuration as plain JSON data.

    With ``--replay`` everything comes from an earlier summary; any explicit
    flag still overrides it.
    """
    if args.replay:
        doc = _read_json(args.replay, "summary")
        if "config" not in doc:
            raise ConfigError("summary has no 'config' section")
        run = dict(doc["config"])
    else:
        if not args.scenario and args.mode != "self-test":
            raise ConfigError("--scenario is required")
        run = {"scenario": _read_json(args.scenario, "scenario") if args.scenario else None,
               "params": _read_json(args.params or "vehicle", "vehicle parameters"),
               "planner": _read_json(args.planner or "planner", "planner config"),
               "mode": args.mode or "closed-loop", "strict_timing": False,
               "at": 0.0}
    if args.replay:
        if args.scenario:
            run["scenario"] = _read_json(args.scenario, "scenario")
        if args.params:
            run["params"] = _read_json(args.params, "vehicle parameters")
        if args.planner:
            run["planner"] = _read_json(args.planner, "planner config")
        if args.mode:
            run["mode"] = args.mode
    if args.strict_timing:
        run["strict_timing"] = True
    if args.at is not None:
        run["at"] = args.at
    if run.get("scenario") is not None and args.seed is not None:
        run["scenario"] = {**run["scenario"], "seed": args.seed}
    return run


def build_objects(run: dict):
    try:
        params, limits = params_from_dict(run["params"])
        planner_doc = dict(run["planner"])
        if run.get("strict_timing"):
            planner_doc["strict_timing"] = True
        config = PlannerConfig.from_dict(planner_doc)
        scenario = Scenario.from_dict(run["scenario"]) if run.get("scenario") else None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    # normalise so the summary records every effective value
    run["params"] = params_to_dict(params, limits)
    run["planner"] = config.to_dict()
    if scenario is not None:
        run["scenario"] = scenario.to_dict()
    return scenario, params, limits, config


# plot data ------------------------------------------------------------------------
def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    return repr(float(v))


def emit_plot_data(log: SimLog, out_dir) -> list:
    """Per-figure CSVs: trajectory overlay, predictions, state/input series, CPU time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [scr.name or f"obs{i}" for i, scr in enumerate(log.scenario.obstacles)]
    rows = log.rows.reshape(-1, len(LOG_COLUMNS))
    road = log.scenario.road

    header = ["t", "ego_s", "ego_y", "ego_X", "ego_Y"]
    for nm in names:
        header += [f"{nm}_s", f"{nm}_y", f"{nm}_X", f"{nm}_Y"]
    traj = []
    for i, r in enumerate(rows):
        row = [_num(r[0]), _num(r[1]), _num(r[2]), _num(r[9]), _num(r[10])]
        for j in range(len(names)):
            s, y = log.obstacle_truth[i, j]
            X, Y, _ = road.curvilinear_to_global(np.clip(s, road.s_min, road.s_max), y, 0.0)
            row += [_num(s), _num(y), _num(X), _num(Y)]
        traj.append(row)
    _write_csv(out / "trajectory.csv", header, traj)

    pred = []
    for c in log.cycles:
        if c.trajectory is None:
            continue
        for k, x in enumerate(c.trajectory):
            pred.append([c.index, _num(c.t), c.selected, k, _num(x[vm.T]), _num(x[vm.S]),
                         _num(x[vm.Y]), _num(x[vm.VX])])
    _write_csv(out / "predictions.csv",
               ["cycle", "t", "planner", "node", "t_node", "s", "y", "Vx"], pred)

    states = [[*map(_num, r[:9]), _num(u[0]), _num(u[1])]
              for r, u in zip(rows, log.controls.reshape(-1, 2))]
    _write_csv(out / "states.csv", list(LOG_COLUMNS[:9]) + ["u1", "u2"], states)

    cpu = []
    for c in log.cycles:
        for d in sorted(c.subs, key=lambda d: d.id):
            cpu.append([c.index, _num(c.t), d.id, d.rank, d.status, _num(d.wall),
                        _num(sum(d.prep_times)), _num(sum(d.qp_times)),
                        "/".join(str(n) for n in d.n_wsr)])
    _write_csv(out / "cpu_time.csv",
               ["cycle", "t", "planner", "rank", "status", "wall", "prep", "qp", "n_wsr"], cpu)
    return [out / n for n in ("trajectory.csv", "predictions.csv", "states.csv", "cpu_time.csv")]


# modes ----------------------------------------------------------------------------
def _qp_dumper(out: Path):
    qp_dir = out / "qp"
    qp_dir.mkdir(parents=True, exist_ok=True)

    def dump(cycle, sub_id, sqp_index, qp, status):
        dump_qp(qp, qp_dir / f"c{cycle:04d}_{sub_id}_{sqp_index}_{status}.qp")
    return dump


def _exit_code(log: SimLog, strict: bool, timing: dict) -> int:
    kinds = {e["type"] for e in log.events}
    if kinds & {"collision", "map_exit"}:
        return EXIT_COLLISION
    if kinds & {"emergency", "divergence"}:
        return EXIT_EXHAUSTED
    if strict and not (timing["cycle_ok"] and timing["feedback_ok"]):
        return EXIT_BUDGET
    return EXIT_OK


def closed_loop(run: dict, scenario, params, limits, config, out: Path, dump: bool) -> int:
    planner = Planner(scenario.road, params, limits, config,
                      qp_dump=_qp_dumper(out) if dump else None)
    outputs = []
    with planner:
        log = run_closed_loop(scenario, config, params, limits, planner=planner,
                              on_cycle=lambda k, o: outputs.append(o))
    log.write_csv(out / "log.csv")
    (out / "cycles.csv").write_text(log.cycle_table(), encoding="utf-8")
    (out / "diagnostics.jsonl").write_text(
        "".join(line + "\n" for line in log.diagnostics_lines()), encoding="utf-8")
    emit_plot_data(log, out / "plots")
    timing = budget_violations(outputs, config)
    code = _exit_code(log, config.strict_timing, timing)
    audit = constraint_audit(log, limits)
    summary = {"config": run,
               "result": {"exit_code": code, "completed": log.completed, "events": log.events,
                          "cycles": len(log.cycles), "audit": _jsonable(audit),
                          "timing": timing}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"{scenario.name}: {len(log.cycles)} cycles, events {[e['type'] for e in log.events]}, "
          f"min clearance {audit['min_clearance']:.3f} m, "
          f"median cycle {timing['median_cycle'] * 1e3:.1f} ms -> exit {code}")
    return code


def single_solve(run: dict, scenario, params, limits, config, out: Path, dump: bool) -> int:
    """One planning cycle on the scenario frozen at ``run['at']`` seconds."""
    t = float(run.get("at", 0.0))
    x0 = scenario.x0.copy()
    x0[vm.T] = t
    visible = [scr.snapshot(t) for scr in scenario.obstacles if scr.visible(t)]
    planner = Planner(scenario.road, params, limits, config,
                      qp_dump=_qp_dumper(out) if dump else None)
    with planner:
        result = planner.plan_cycle(x0, visible, scenario.command_at(t),
                                    scenario.perceived_horizon)
    rows = []
    for sub in planner.subs:
        if sub.iterate is None:
            continue
        U = np.vstack([sub.iterate.U, np.full((1, vm.NU), np.nan)])
        for k, (x, u) in enumerate(zip(sub.iterate.X, U)):
            rows.append([sub.id, k, *map(_num, x), _num(u[0]), _num(u[1])])
    _write_csv(out / "single_solve.csv", ["planner", "node", *vm.STATE_NAMES, "u1", "u2"], rows)
    code = EXIT_OK if result.selected is not None else EXIT_EXHAUSTED
    summary = {"config": run,
               "result": {"exit_code": code, "selected": result.selected,
                          "status": result.status, "u": [float(v) for v in result.u],
                          "subs": [d.record(False) for d in result.subs]}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"single solve at t={t}: selected {result.selected}, status {result.status}, "
          f"u = {result.u}")
    return code


def self_test() -> int:
    results = run_checks()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_EXHAUSTED


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="urbanmpc", description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", help="scenario JSON path or bundled name "
                    "(overtake, blind_spot, cruise)")
    ap.add_argument("--params", help="vehicle parameter JSON (default: bundled vehicle)")
    ap.add_argument("--planner", help="planner config JSON (default: bundled planner)")
    ap.add_argument("--out", default="run", help="output directory (default: ./run)")
    ap.add_argument("--seed", type=int, help="override the scenario RNG seed")
    ap.add_argument("--mode", choices=MODES, help="default: closed-loop")
    ap.add_argument("--dump-qp", action="store_true", help="write every feedback QP to OUT/qp/")
    ap.add_argument("--strict-timing", action="store_true",
                    help="enforce the QP time budget and exit 5 on budget overruns")
    ap.add_argument("--replay", metavar="SUMMARY",
                    help="re-run the exact configuration recorded in a summary.json")
    ap.add_argument("--at", type=float, help="snapshot time for single-solve (s)")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        run = resolve_run(args)
        if run["mode"] == "self-test":
            return self_test()
        scenario, params, limits, config = build_objects(run)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if run["mode"] == "single-solve":
            return single_solve(run, scenario, params, limits, config, out, args.dump_qp)
        return closed_loop(run, scenario, params, limits, config, out, args.dump_qp)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
