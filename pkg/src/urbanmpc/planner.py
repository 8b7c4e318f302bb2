"""Parallel sub-planners with staggered spatial horizons.

Every cycle each sub-planner solves its own OCP (same model and world
snapshot, different simulated spatial horizon). The control of the longest
horizon that produced a feasible solution is applied. When the leader fails,
the planner that saved the cycle takes over the lead and the failed one is
reinitialised from it.
"""
from __future__ import annotations

import dataclasses
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import vehicle as vm
from .constraints import SoftPenaltyConfig
from .ocp import (DRIVE_SPANS, OVERTAKE_SPANS, RATE_SPANS, BehaviouralCommand, DrivingMode,
                  HorizonConfig, Mode, blend_modes, build_ocp, conform_to_speed_cap, make_weights,
                  speed_cap_parameters, with_terminal)
from .qp import BUDGET_EXCEEDED, OPTIMAL
from .rti import FeedbackError, PreparationError, RtiEngine, ShootingIterate, shift
from .vehicle import TR, VX, ActuatorLimits, VehicleParams

OK = "ok"
FALLBACK = "fallback"
EMERGENCY = "emergency"
FAILED = "failed"
IDLE = "idle"


def stopping_distance(vx: float, a_max: float, dt: float = 0.0) -> float:
    """Braking distance ``vx^2 / (2 a_max)`` plus one cycle of travel."""
    if not a_max > 0:
        raise ValueError("a_max must be positive")
    vx = max(float(vx), 0.0)
    return vx * vx / (2.0 * a_max) + vx * dt


@dataclass(frozen=True)
class PlannerConfig:
    N: int = 60
    dt: float = 0.05
    n_obs: int = 3
    horizon_ratios: tuple = (1.0, 0.6)  # leading planners; the last one uses the stopping distance
    a_stop: float = 4.0                 # deceleration behind the stopping-distance horizon
    a_comfort: float = 3.0
    n_sqp_leader: int = 2
    n_sqp_other: int = 1
    max_wsr: int = 80
    sub_budget: float = 0.010
    cycle_budget: float = 0.050
    strict_timing: bool = False
    emergency: bool = True
    t_blend: float = 1.0
    grow_factor: float = 2.0  # horizon regrowth per cycle, in units of v_ref * dt
    workers: int = 0          # 0: one per sub-planner, capped by the CPU count
    activation_factor: float = 2.0
    min_horizon: float = 5.0  # floor under every horizon, so slow planners keep room to act
    soft: SoftPenaltyConfig = field(default_factory=SoftPenaltyConfig)
    drive_spans: dict = field(default_factory=lambda: dict(DRIVE_SPANS))
    overtake_spans: dict = field(default_factory=lambda: dict(OVERTAKE_SPANS))
    rate_spans: tuple = RATE_SPANS

    def __post_init__(self):
        if self.N < 1 or self.dt <= 0:
            raise ValueError("horizon needs N >= 1 and dt > 0")
        ratios = tuple(self.horizon_ratios)
        if any(r <= 0 or r > 1 for r in ratios) or list(ratios) != sorted(ratios, reverse=True):
            raise ValueError("horizon ratios must lie in (0, 1] in decreasing order")
        if self.n_sqp_leader < 1 or self.n_sqp_other < 1:
            raise ValueError("SQP allotments must be at least 1")

    @property
    def n_sub(self) -> int:
        return len(self.horizon_ratios) + 1

    def horizon_config(self) -> HorizonConfig:
        return HorizonConfig(self.N, self.dt, self.n_obs, self.a_comfort,
                             self.activation_factor, self.soft)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["horizon_ratios"] = list(self.horizon_ratios)
        d["rate_spans"] = list(self.rate_spans)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PlannerConfig":
        doc = dict(doc)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown planner config keys: {sorted(unknown)}")
        if "soft" in doc:
            doc["soft"] = SoftPenaltyConfig(**doc["soft"])
        for key in ("horizon_ratios", "rate_spans"):
            if key in doc:
                doc[key] = tuple(doc[key])
        for key in ("drive_spans", "overtake_spans"):
            if key in doc:
                base = dict(DRIVE_SPANS if key == "drive_spans" else OVERTAKE_SPANS)
                base.update(doc[key])
                doc[key] = base
        return cls(**doc)


@dataclass
class SubPlanner:
    id: str
    horizon: float
    engine: RtiEngine
    iterate: ShootingIterate | None = None
    n_sqp: int = 1
    status: str = IDLE
    rows_per_node: int = 0


@dataclass
class SubDiagnostics:
    id: str
    horizon: float
    rank: int
    n_sqp: int
    status: str
    qp_status: str = OPTIMAL
    n_wsr: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    prep_times: list = field(default_factory=list)
    qp_times: list = field(default_factory=list)
    wall: float = 0.0
    error: str = ""

    def record(self, with_timing: bool = True) -> dict:
        d = {"id": self.id, "horizon": self.horizon, "rank": self.rank, "n_sqp": self.n_sqp,
             "status": self.status, "qp_status": self.qp_status, "n_wsr": list(self.n_wsr),
             "kkt": list(self.kkt), "error": self.error}
        if with_timing:
            d.update(prep_times=list(self.prep_times), qp_times=list(self.qp_times),
                     wall=self.wall)
        return d


@dataclass
class PlannerOutput:
    u: np.ndarray
    selected: str | None
    status: str
    trajectory: np.ndarray | None
    controls: np.ndarray | None
    subs: list
    wall_time: float
    mode_lambda: float

    @property
    def leader(self) -> SubDiagnostics:
        return min(self.subs, key=lambda d: d.rank)


class Planner:
    """Owns the sub-planners, the driving-mode blend and the selection logic."""

    def __init__(self, road, params: VehicleParams | None = None,
                 limits: ActuatorLimits | None = None, config: PlannerConfig | None = None,
                 qp_dump=None):
        self.road = road
        self.params = params or VehicleParams()
        self.limits = limits or ActuatorLimits()
        self.config = config or PlannerConfig()
        self.mode = DrivingMode(t_blend=self.config.t_blend)
        self.qp_dump = qp_dump
        cfg = self.config
        budget = cfg.sub_budget if cfg.strict_timing else None
        ids = "ABCDEFGH"[:cfg.n_sub]
        self.subs = [SubPlanner(i, 0.0, RtiEngine(max_wsr=cfg.max_wsr, budget=budget))
                     for i in ids]
        self.order = list(range(cfg.n_sub))  # leader first
        self._weights_cache = {}
        self.cycle = 0
        workers = cfg.workers or min(cfg.n_sub, os.cpu_count() or 1)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # weights ---------------------------------------------------------------
    def _weight_tables(self, v_ref: float):
        key = round(float(v_ref), 9)
        if key not in self._weights_cache:
            cfg = self.config
            drive = make_weights(cfg.drive_spans, cfg.soft, cfg.n_obs, cfg.rate_spans)
            over = make_weights(cfg.overtake_spans, cfg.soft, cfg.n_obs, cfg.rate_spans)
            v_lin = max(v_ref, 1.0)
            self._weights_cache[key] = (with_terminal(drive, self.params, v_lin, cfg.dt),
                                        with_terminal(over, self.params, v_lin, cfg.dt))
        return self._weights_cache[key]

    # horizons --------------------------------------------------------------
    def target_horizons(self, vx: float, perceived: float):
        """Nominal horizon per rank, leader first."""
        cfg = self.config
        stop = min(stopping_distance(vx, cfg.a_stop, cfg.dt), perceived)
        targets = [max(r * perceived, stop) for r in cfg.horizon_ratios] + [stop]
        return [min(max(t, cfg.min_horizon), perceived) for t in targets]

    def _update_horizons(self, vx: float, perceived: float, v_ref: float):
        cfg = self.config
        targets = self.target_horizons(vx, perceived)
        grow = cfg.grow_factor * max(v_ref, 1.0) * cfg.dt
        floor = targets[-1]  # no planner may see less than the stopping distance
        prev = None
        for rank, idx in enumerate(self.order):
            sub = self.subs[idx]
            if sub.horizon <= 0.0 or sub.horizon > targets[rank]:
                h = targets[rank]
            else:
                h = min(targets[rank], sub.horizon + grow)
            h = max(h, floor)
            if prev is not None:
                h = min(h, prev)
            sub.horizon = h
            prev = h

    # lifecycle -------------------------------------------------------------
    def _fresh_iterate(self, x0) -> ShootingIterate:
        cfg = self.config
        it = ShootingIterate.constant(x0, cfg.N, vm.NU, cfg.dt)
        it.X[:, vm.S] = x0[vm.S] + max(x0[VX], 0.0) * cfg.dt * np.arange(cfg.N + 1)
        return it

    def restart_reinit(self, estimate) -> None:
        """Reset every iterate to the constant-state trajectory (low speed only)."""
        x0 = np.asarray(estimate, dtype=float)
        if x0[VX] >= 2.0:
            raise ValueError("restart reinitialisation is only valid below 2 m/s")
        for sub in self.subs:
            sub.iterate = ShootingIterate.constant(x0, self.config.N, vm.NU, self.config.dt)

    def reinitialize(self, sub: SubPlanner, donor: SubPlanner, horizon: float | None = None):
        """Copy the donor's iterate into ``sub``; optionally set its horizon."""
        if donor is not sub:
            sub.iterate = donor.iterate.copy()
        if horizon is not None:
            sub.horizon = horizon
        return sub

    # the cycle -------------------------------------------------------------
    def _run_sub(self, sub: SubPlanner, rank: int, x0, obstacles, command, weights):
        cfg = self.config
        diag = SubDiagnostics(sub.id, sub.horizon, rank, sub.n_sqp, FAILED)
        t_start = time.perf_counter()
        try:
            hc = cfg.horizon_config()
            cap = speed_cap_parameters(x0, command, sub.horizon, hc.a_comfort, hc.cap_ratio,
                                       hc.t_ramp)
            sub.iterate.X = conform_to_speed_cap(sub.iterate.X, *cap, cfg.dt)
            problem = build_ocp(x0, self.road, obstacles, command, hc, weights,
                                self.params, self.limits, sub.horizon, X_guess=sub.iterate.X)
            sub.rows_per_node = problem.rows_per_node
            result = sub.engine.sqp_cycle(sub.iterate, problem, x0, sub.n_sqp)
            if not np.all(np.isfinite(result.iterate.X)):
                raise PreparationError("iterate diverged")
            diag.n_wsr, diag.kkt = result.n_wsr, result.kkt
            diag.prep_times, diag.qp_times = result.prep_times, result.qp_times
            diag.status = OK
            sub.iterate = result.iterate
            sub.status = OK
            if self.qp_dump is not None:
                for j, qp in enumerate(result.qps):
                    self.qp_dump(self.cycle, sub.id, j, qp, OPTIMAL)
        except FeedbackError as exc:
            diag.qp_status = exc.status
            diag.error = str(exc)
            if exc.partial is not None:
                part = exc.partial
                diag.n_wsr, diag.kkt = part.n_wsr, part.kkt
                diag.prep_times, diag.qp_times = part.prep_times, part.qp_times
            elif exc.solution is not None:
                diag.n_wsr = [exc.solution.n_wsr]
            if self.qp_dump is not None and exc.qp is not None:
                self.qp_dump(self.cycle, sub.id, 0, exc.qp, exc.status)
            sub.status = FAILED
        except (PreparationError, vm.SingularityError, vm.IntegrationError, ValueError) as exc:
            diag.qp_status = "preparation"
            diag.error = f"{type(exc).__name__}: {exc}"
            sub.status = FAILED
        diag.wall = time.perf_counter() - t_start
        return diag

    def plan_cycle(self, estimate, obstacles, command: BehaviouralCommand,
                   perceived_horizon: float) -> PlannerOutput:
        t_start = time.perf_counter()
        cfg = self.config
        x0 = np.asarray(estimate, dtype=float)
        self.mode.target = command.mode
        lam = self.mode.advance(cfg.dt) if self.cycle > 0 else self._initial_lambda(command)
        drive, over = self._weight_tables(command.v_ref)
        weights = blend_modes(drive, over, lam)
        self._update_horizons(x0[VX], perceived_horizon, command.v_ref)

        for rank, idx in enumerate(self.order):
            sub = self.subs[idx]
            sub.n_sqp = cfg.n_sqp_leader if rank == 0 else cfg.n_sqp_other
            if sub.iterate is None:
                sub.iterate = self._fresh_iterate(x0)
            elif self.cycle > 0:
                sub.iterate = shift(sub.iterate, cfg.dt, sub.rows_per_node)

        obstacles = tuple(obstacles)
        jobs = [(self.subs[idx], rank) for rank, idx in enumerate(self.order)]
        if self._pool is not None:
            futures = [self._pool.submit(self._run_sub, sub, rank, x0, obstacles, command,
                                         weights) for sub, rank in jobs]
            diags = [f.result() for f in futures]
        else:
            diags = [self._run_sub(sub, rank, x0, obstacles, command, weights)
                     for sub, rank in jobs]

        chosen = next((rank for rank, d in enumerate(diags) if d.status == OK), None)
        if chosen is None:
            out = self._emergency(x0, diags, lam)
        else:
            out = self._select(chosen, diags, lam)
        self.cycle += 1
        out.wall_time = time.perf_counter() - t_start
        return out

    def _initial_lambda(self, command):
        self.mode.lam = 1.0 if command.mode == Mode.OVERTAKE else 0.0
        return self.mode.lam

    def _select(self, chosen_rank, diags, lam) -> PlannerOutput:
        donor_idx = self.order[chosen_rank]
        donor = self.subs[donor_idx]
        u = donor.iterate.U[0].copy()
        trajectory = donor.iterate.X.copy()
        controls = donor.iterate.U.copy()
        status = OK if chosen_rank == 0 else FALLBACK
        # promotion: the donor leads; planners that failed above it restart from the
        # donor with its horizon, failures below it only take its iterate
        above = set(self.order[:chosen_rank])
        failed = [self.order[r] for r, d in enumerate(diags) if d.status != OK]
        if chosen_rank > 0:
            self.order = [donor_idx] + [i for i in self.order if i != donor_idx]
        for idx in failed:
            self.reinitialize(self.subs[idx], donor, donor.horizon if idx in above else None)
        return PlannerOutput(u, donor.id, status, trajectory, controls, diags, 0.0, lam)

    def _emergency(self, x0, diags, lam) -> PlannerOutput:
        lim = self.limits
        vy_dot = vm.lateral_acceleration(x0, self.params)
        tr_min, _ = vm.friction_ellipse_bounds(x0, vy_dot, self.params)
        tr_target = max(float(tr_min), lim.Tr_min)
        if x0[VX] <= 0.05:
            tr_target = 0.0
        rate = np.clip((tr_target - x0[TR]) / self.config.dt, -lim.Tr_rate_max, lim.Tr_rate_max)
        u = np.array([0.0, rate if self.config.emergency else 0.0])
        for sub in self.subs:
            sub.iterate = self._fresh_iterate(x0)
            sub.status = FAILED
        return PlannerOutput(u, None, EMERGENCY, None, None, diags, 0.0, lam)


def budget_violations(outputs, config: PlannerConfig) -> dict:
    """Median cycle time and median leader feedback time against the budgets."""
    walls = [o.wall_time for o in outputs]
    leader_fb = [o.leader.qp_times[0] for o in outputs if o.leader.qp_times]
    med_cycle = float(np.median(walls)) if walls else 0.0
    med_fb = float(np.median(leader_fb)) if leader_fb else 0.0
    exceeded = any(d.qp_status == BUDGET_EXCEEDED for o in outputs for d in o.subs)
    return {"median_cycle": med_cycle, "median_leader_feedback": med_fb,
            "cycle_ok": med_cycle < config.cycle_budget,
            "feedback_ok": med_fb < config.sub_budget, "qp_budget_exceeded": exceeded}
