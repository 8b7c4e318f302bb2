"""Closed-loop scenario simulation with a perturbed single-track plant."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vehicle as vm
from .constraints import Obstacle
from .ocp import BehaviouralCommand
from .planner import EMERGENCY, Planner, PlannerConfig
from .road import OutOfMapError, RoadMap, road_from_dict
from .vehicle import (DELTA, NX, OMEGA, S, T, TR, VX, VY, XI, Y, ActuatorLimits,
                      VehicleParams)

LOG_COLUMNS = ("t", "s", "y", "xi", "Vx", "Vy", "omega", "delta", "Tr", "X", "Y", "psi")
PERTURBABLE = ("mass", "Jz", "D", "c_aero")


@dataclass(frozen=True)
class ObstacleScript:
    """Obstacle moving with piecewise-constant road-frame velocities.

    ``phases`` holds ``(t_start, Vs, Vy)`` tuples sorted by start time; the
    first phase starts at 0.
    """

    s0: float
    y0: float
    phases: tuple = ((0.0, 0.0, 0.0),)
    detection_time: float = 0.0
    rho_obs: float = 1.2
    d_c_obs: float = 1.1
    static_heading: float = 0.0
    d_s_rate: float = 0.0
    d_y_rate: float = 0.0
    name: str = ""

    def __post_init__(self):
        starts = [p[0] for p in self.phases]
        if not starts or starts[0] != 0.0 or starts != sorted(starts):
            raise ValueError("obstacle phases must start at 0 and be sorted")

    def state_at(self, t: float):
        """Position and velocity ``(s, y, Vs, Vy)`` at time ``t``."""
        s, y = self.s0, self.y0
        vs = vy = 0.0
        for k, (t0, vs, vy) in enumerate(self.phases):
            t1 = self.phases[k + 1][0] if k + 1 < len(self.phases) else math.inf
            span = min(t, t1) - t0
            if span <= 0:
                break
            s += vs * span
            y += vy * span
            if t < t1:
                break
        return s, y, vs, vy

    def snapshot(self, t: float) -> Obstacle:
        s, y, vs, vy = self.state_at(t)
        return Obstacle(s, y, vs, vy, self.rho_obs, self.d_c_obs, self.static_heading,
                        d_s_rate=self.d_s_rate, d_y_rate=self.d_y_rate, name=self.name)

    def visible(self, t: float) -> bool:
        return t >= self.detection_time - 1e-9

    @classmethod
    def from_dict(cls, d: dict) -> "ObstacleScript":
        d = dict(d)
        if "phases" in d:
            d["phases"] = tuple(tuple(float(v) for v in p) for p in d["phases"])
        else:
            d["phases"] = ((0.0, float(d.pop("Vs", 0.0)), float(d.pop("Vy", 0.0))),)
        return cls(**d)

    def to_dict(self) -> dict:
        return {"s0": self.s0, "y0": self.y0, "phases": [list(p) for p in self.phases],
                "detection_time": self.detection_time, "rho_obs": self.rho_obs,
                "d_c_obs": self.d_c_obs, "static_heading": self.static_heading,
                "d_s_rate": self.d_s_rate, "d_y_rate": self.d_y_rate, "name": self.name}


@dataclass
class Scenario:
    name: str
    road: RoadMap
    road_doc: dict
    x0: np.ndarray
    obstacles: tuple
    commands: tuple
    duration: float
    perceived_horizon: float = 60.0
    perturbation: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    seed: int = 0
    h_plant: float = 0.001

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        times = [c.t for c in self.commands]
        if not times or times != sorted(times):
            raise ValueError("commands must be non-empty and sorted by activation time")
        if any(k not in PERTURBABLE for k in self.perturbation):
            raise ValueError(f"perturbation keys must be among {PERTURBABLE}")
        if any(not v > 0 for v in self.perturbation.values()):
            raise ValueError("perturbation factors must be positive")
        if not 0 < self.h_plant <= 0.001 + 1e-15:
            raise ValueError("plant step must not exceed 1 ms")

    def command_at(self, t: float) -> BehaviouralCommand:
        active = self.commands[0]
        for c in self.commands:
            if c.t <= t + 1e-9:
                active = c
        return active

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        known = {"name", "road", "ego", "obstacles", "commands", "duration", "perceived_horizon",
                 "perturbation", "noise", "seed", "h_plant"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        x0 = np.zeros(NX)
        for name, value in doc.get("ego", {}).items():
            if name not in vm.STATE_NAMES:
                raise ValueError(f"unknown ego state {name!r}")
            x0[vm.STATE_NAMES.index(name)] = float(value)
        return cls(name=doc.get("name", "scenario"), road=road_from_dict(doc["road"]),
                   road_doc=doc["road"], x0=x0,
                   obstacles=tuple(ObstacleScript.from_dict(o) for o in doc.get("obstacles", [])),
                   commands=tuple(BehaviouralCommand.from_dict(c) for c in doc["commands"]),
                   duration=float(doc["duration"]),
                   perceived_horizon=float(doc.get("perceived_horizon", 60.0)),
                   perturbation=dict(doc.get("perturbation", {})), noise=dict(doc.get("noise", {})),
                   seed=int(doc.get("seed", 0)), h_plant=float(doc.get("h_plant", 0.001)))

    def to_dict(self) -> dict:
        return {"name": self.name, "road": self.road_doc,
                "ego": {n: float(v) for n, v in zip(vm.STATE_NAMES, self.x0)},
                "obstacles": [o.to_dict() for o in self.obstacles],
                "commands": [c.to_dict() for c in self.commands], "duration": self.duration,
                "perceived_horizon": self.perceived_horizon, "perturbation": self.perturbation,
                "noise": self.noise, "seed": self.seed, "h_plant": self.h_plant}


def load_scenario(path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# plant ---------------------------------------------------------------------------
def plant_params(params: VehicleParams, perturbation: dict) -> VehicleParams:
    return params.perturbed(**perturbation) if perturbation else params


def step_plant(x, u, h_plant: float, road: RoadMap, params: VehicleParams):
    """One explicit RK4 step of the plant (controls held constant)."""
    if h_plant > 0.001 + 1e-15:
        raise ValueError("plant step must not exceed 1 ms")
    return vm.rk4_step(x, u, h_plant, road.curvature_at, params)


# logging -------------------------------------------------------------------------
@dataclass
class CycleRecord:
    index: int
    t: float
    u: np.ndarray
    selected: str | None
    status: str
    lam: float
    subs: list           # SubDiagnostics
    trajectory: np.ndarray | None
    obstacles: list      # visible obstacle snapshots (s, y)
    wall_time: float


@dataclass
class SimLog:
    scenario: Scenario
    rows: np.ndarray                 # (n_steps, 12) columns LOG_COLUMNS
    controls: np.ndarray             # (n_steps, 2) control held over each step
    obstacle_truth: np.ndarray       # (n_steps, n_obs, 2) true obstacle s, y
    cycles: list
    events: list
    plant: VehicleParams

    @property
    def completed(self) -> bool:
        return not any(e["type"] in ("collision", "map_exit") for e in self.events)

    def write_csv(self, path) -> None:
        Path(path).write_text(log_csv_text(self), encoding="utf-8")

    def cycle_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ids = [d.id for d in self.cycles[0].subs] if self.cycles else []
        w.writerow(["cycle", "t", "u1", "u2", "selected", "status", "lambda"]
                   + [f"{i}_{k}" for i in sorted(ids) for k in ("horizon", "status", "n_wsr")])
        for c in self.cycles:
            by_id = {d.id: d for d in c.subs}
            row = [c.index, repr(c.t), repr(float(c.u[0])), repr(float(c.u[1])),
                   c.selected or "", c.status, repr(c.lam)]
            for i in sorted(by_id):
                d = by_id[i]
                row += [repr(float(d.horizon)), d.status, "/".join(str(n) for n in d.n_wsr)]
            w.writerow(row)
        return buf.getvalue()

    def diagnostics_lines(self) -> list:
        return [json.dumps({"cycle": c.index, "t": c.t, "selected": c.selected,
                            "status": c.status, "wall_time": c.wall_time,
                            "subs": [d.record(True) for d in c.subs]}) for c in self.cycles]


def log_csv_text(log: SimLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in log.rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# closed loop ---------------------------------------------------------------------
def _clearance(x, obstacles_sy, scripts, params):
    """Smallest circle-pair clearance between ego and every obstacle (truth)."""
    best = math.inf
    sig = (1.0, -1.0)
    for (so, yo), scr in zip(obstacles_sy, scripts):
        vs, vy = scr.state_at(x[T])[2:]
        psi = scr.static_heading if vs == 0.0 and vy == 0.0 else math.atan2(vy, vs)
        for a in sig:
            es = x[S] + a * params.d_c * math.cos(x[XI])
            ey = x[Y] + a * params.d_c * math.sin(x[XI])
            for b in sig:
                os_ = so + b * scr.d_c_obs * math.cos(psi)
                oy_ = yo + b * scr.d_c_obs * math.sin(psi)
                d = math.hypot(es - os_, ey - oy_) - params.rho_ego - scr.rho_obs
                best = min(best, d)
    return best


def run_closed_loop(scenario: Scenario, config: PlannerConfig | None = None,
                    params: VehicleParams | None = None, limits: ActuatorLimits | None = None,
                    planner: Planner | None = None, on_cycle=None) -> SimLog:
    """Simulate ``scenario`` with the planner in the loop at ``1 / config.dt`` Hz."""
    config = config or PlannerConfig()
    params = params or VehicleParams()
    limits = limits or ActuatorLimits()
    road = scenario.road
    plant = plant_params(params, scenario.perturbation)
    rng = np.random.default_rng(scenario.seed)
    noise = np.zeros(NX)
    for name, std in scenario.noise.items():
        noise[vm.STATE_NAMES.index(name)] = float(std)

    own_planner = planner is None
    planner = planner or Planner(road, params, limits, config)
    steps_per_cycle = int(round(config.dt / scenario.h_plant))
    if abs(steps_per_cycle * scenario.h_plant - config.dt) > 1e-12:
        raise ValueError("planner period must be a multiple of the plant step")
    n_cycles = int(round(scenario.duration / config.dt))

    x = scenario.x0.copy()
    x[T] = 0.0
    rows, ctrl, truth, cycles, events = [], [], [], [], []
    scripts = scenario.obstacles

    def record(state, u):
        X, Yg, psi = road.curvilinear_to_global(state[S], state[Y], state[XI])
        rows.append([state[T], *state[:T], float(X), float(Yg), float(psi)])
        ctrl.append(u.copy())
        truth.append([scr.state_at(state[T])[:2] for scr in scripts])

    u = np.zeros(2)
    record(x, u)
    stop = False
    try:
        for k in range(n_cycles):
            t = k * config.dt
            measured = x + noise * rng.standard_normal(NX) if noise.any() else x.copy()
            measured[T] = t
            visible = [scr.snapshot(t) for scr in scripts if scr.visible(t)]
            command = scenario.command_at(t)
            out = planner.plan_cycle(measured, visible, command, scenario.perceived_horizon)
            u = np.asarray(out.u, dtype=float)
            cycles.append(CycleRecord(k, t, u.copy(), out.selected, out.status, out.mode_lambda,
                                      out.subs, out.trajectory,
                                      [(o.s0, o.y0) for o in visible], out.wall_time))
            if out.status == EMERGENCY:
                events.append({"type": "emergency", "t": t, "cycle": k})
            if on_cycle is not None:
                on_cycle(k, out)
            for j in range(steps_per_cycle):
                try:
                    x = step_plant(x, u, scenario.h_plant, road, plant)
                except OutOfMapError:
                    events.append({"type": "map_exit", "t": float(x[T])})
                    stop = True
                    break
                x[T] = t + (j + 1) * scenario.h_plant
                if not np.all(np.isfinite(x)):
                    events.append({"type": "divergence", "t": float(x[T])})
                    stop = True
                    break
                if x[S] > road.s_max or x[S] < road.s_min:
                    events.append({"type": "map_exit", "t": float(x[T])})
                    stop = True
                    break
                record(x, u)
                sy = [scr.state_at(x[T])[:2] for scr in scripts]
                if scripts and _clearance(x, sy, scripts, plant) < 0.0:
                    events.append({"type": "collision", "t": float(x[T])})
                    stop = True
                    break
            if stop:
                break
    finally:
        if own_planner:
            planner.close()
    n_obs = len(scripts)
    truth_arr = np.array(truth, dtype=float).reshape(len(rows), n_obs, 2)
    return SimLog(scenario, np.array(rows, dtype=float), np.array(ctrl, dtype=float), truth_arr,
                  cycles, events, plant)


# audit ---------------------------------------------------------------------------
def constraint_audit(log: SimLog, limits: ActuatorLimits | None = None) -> dict:
    """Plant-truth margins over the whole run (positive means satisfied)."""
    limits = limits or ActuatorLimits()
    p = log.plant
    road = log.scenario.road
    X = log.rows[:, 1:1 + T].copy()  # s..Tr
    states = np.zeros((len(log.rows), NX))
    states[:, :T] = X
    states[:, T] = log.rows[:, 0]
    clear = math.inf
    for i, x in enumerate(states):
        if log.scenario.obstacles:
            sy = log.obstacle_truth[i]
            clear = min(clear, _clearance(x, sy, log.scenario.obstacles, p))
    sig = np.array([1.0, -1.0])[:, None]
    es = states[:, S] + sig * p.d_c * np.cos(states[:, XI])
    ey = states[:, Y] + sig * p.d_c * np.sin(states[:, XI])
    yl, yr = road.boundaries_at(np.clip(es, road.s_min, road.s_max))
    boundary = float(min((yl - ey - p.rho_ego).min(), (ey - yr - p.rho_ego).min()))
    xt = states.T
    vy_dot = vm.lateral_acceleration(xt, p)
    lo, hi = vm.friction_ellipse_bounds(xt, vy_dot, p)
    ellipse = float(min((hi - states[:, TR]).min(), (states[:, TR] - lo).min()))
    dx = vm.dynamics(xt, log.controls.T, road.curvature_at(np.clip(xt[S], road.s_min,
                                                                   road.s_max)), p)
    decel = float(max(0.0, (-dx[VX]).max()))
    delta_margin = float(limits.delta_max - np.abs(states[:, DELTA]).max())
    rates_ok = True
    if len(log.cycles) > 1:
        us = np.array([c.u for c in log.cycles])
        lb, ub = limits.control_bounds()
        rates_ok = bool(np.all(us >= lb - 1e-9) and np.all(us <= ub + 1e-9))
    return {"min_clearance": float(clear), "min_boundary_margin": boundary,
            "min_ellipse_margin": ellipse, "peak_deceleration": decel,
            "ellipse_decel_limit": float(p.a2), "delta_margin": delta_margin,
            "rates_within_bounds": rates_ok,
            "max_yaw_rate": float(np.abs(states[:, OMEGA]).max()),
            "max_lateral_velocity": float(np.abs(states[:, VY]).max())}
