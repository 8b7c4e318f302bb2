"""Finite-horizon OCP for one sub-planner cycle.

The cost is a least-squares Bolza form over the vector ``h = [x, C_soft]``:
the nine model states followed by the soft-penalty channels. Soft channels
are laid out per obstacle slot (four circle pairs, then the safety ellipse),
followed by the four road-boundary channels (left edge for both circles,
then right edge).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.linalg

from . import vehicle as vm
from .constraints import (EXP_CLAMP, Obstacle, SoftPenaltyConfig, kappa_vel_for_comfort,
                          predict_obstacle)
from .road import RoadMap
from .vehicle import (DELTA, NU, NX, OMEGA, S, T, TR, VX, VY, XI, Y, ActuatorLimits,
                      VehicleParams)


class RiccatiError(RuntimeError):
    """DARE solution missing or inaccurate at the chosen linearisation point."""


class Mode(str, Enum):
    DRIVE = "DRIVE"
    OVERTAKE = "OVERTAKE"


N_BOUND_SOFT = 4
SOFT_PER_OBSTACLE = 5
ROWS_PER_NODE_BASE = 8  # delta, Tr, ellipse, speed cap, four road-edge rows


def n_soft(n_obs: int) -> int:
    return SOFT_PER_OBSTACLE * n_obs + N_BOUND_SOFT


# weights ----------------------------------------------------------------------
def normalize_state_weights(spans) -> np.ndarray:
    """Diagonal state weights ``1 / span**2``; ``None`` or ``inf`` leaves a state free."""
    out = []
    for span in spans:
        if span is None or (isinstance(span, float) and math.isinf(span)):
            out.append(0.0)
            continue
        if not span > 0:
            raise ValueError("maximum-deviation spans must be positive")
        out.append(1.0 / span**2)
    return np.array(out)


DRIVE_SPANS = {"s": None, "y": 0.5, "xi": 0.1, "Vx": 1.0, "Vy": 0.5, "omega": 0.3,
               "delta": 0.05, "Tr": 200.0, "t": None}
OVERTAKE_SPANS = {**DRIVE_SPANS, "y": 2.5}
RATE_SPANS = (0.2, 1500.0)


def spans_vector(spans: dict):
    return [spans[name] for name in vm.STATE_NAMES]


@dataclass(frozen=True)
class WeightSet:
    Q: np.ndarray  # states then soft channels
    R: np.ndarray
    P: np.ndarray | None = None  # terminal block over the states

    def __post_init__(self):
        if np.any(np.asarray(self.R) <= 0):
            raise ValueError("control weights must be positive")
        if np.any(np.asarray(self.Q) < 0):
            raise ValueError("state weights must be non-negative")

    @property
    def Q_state(self):
        return np.asarray(self.Q)[:NX]

    @property
    def Q_soft(self):
        return np.asarray(self.Q)[NX:]


def soft_weights(cfg: SoftPenaltyConfig, n_obs: int) -> np.ndarray:
    per_obs = [cfg.w_obs] * 4 + [cfg.w_safe]
    return np.array(per_obs * n_obs + [cfg.w_bound] * N_BOUND_SOFT, dtype=float)


def make_weights(spans: dict, cfg: SoftPenaltyConfig, n_obs: int,
                 rate_spans=RATE_SPANS) -> WeightSet:
    Q = np.concatenate([normalize_state_weights(spans_vector(spans)), soft_weights(cfg, n_obs)])
    return WeightSet(Q, normalize_state_weights(rate_spans))


def blend_modes(drive: WeightSet, overtake: WeightSet, lam: float) -> WeightSet:
    """Entrywise convex combination, ``lam = 0`` gives ``drive``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("blend factor must lie in [0, 1]")
    P = None
    if drive.P is not None and overtake.P is not None:
        P = (1.0 - lam) * drive.P + lam * overtake.P
    return WeightSet((1.0 - lam) * np.asarray(drive.Q) + lam * np.asarray(overtake.Q),
                     (1.0 - lam) * np.asarray(drive.R) + lam * np.asarray(overtake.R), P)


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    gain = np.linalg.solve(R + BtP @ B, BtP @ A)
    res = A.T @ P @ A - P - A.T @ P @ B @ gain + Q
    return float(np.abs(res).max())


def solve_dare(A, B, Q, R, method: str = "schur", tol: float = 1e-13, max_iter: int = 100):
    """Stabilising DARE solution by Schur (SciPy) or the structured doubling iteration."""
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    if method == "schur":
        try:
            return scipy.linalg.solve_discrete_are(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise RiccatiError(str(exc)) from exc
    if method != "doubling":
        raise ValueError(f"unknown DARE method {method!r}")
    n = A.shape[0]
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    eye = np.eye(n)
    for _ in range(max_iter):
        W = np.linalg.solve(eye + Gk @ Hk, np.hstack([Ak, Gk]))
        WA, WG = W[:, :n], W[:, n:]
        H_next = Hk + Ak.T @ Hk @ WA
        Gk = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        done = np.abs(H_next - Hk).max() <= tol * max(1.0, np.abs(H_next).max())
        Hk = H_next
        if done:
            return 0.5 * (Hk + Hk.T)
    raise RiccatiError("doubling iteration did not converge")


def cruise_state(params: VehicleParams, v_ref: float) -> np.ndarray:
    """Straight-line cruise at ``v_ref`` with the torque that balances drag."""
    x = np.zeros(NX)
    x[VX] = v_ref
    x[TR] = params.Rr * params.c_aero * v_ref * abs(v_ref)
    return x


def terminal_weight(params: VehicleParams, v_ref: float, Q_state, R, dt: float,
                    method: str = "schur") -> np.ndarray:
    """Terminal weight from the infinite-horizon LQR at straight-line cruise.

    States with zero weight (abscissa, time) are pure integrators the
    regulator cannot see; they are left out of the Riccati equation and get
    zero rows/columns in the result.
    """
    Q_state = np.asarray(Q_state, dtype=float)
    return _terminal_weight_cached(params, float(v_ref), tuple(Q_state.tolist()),
                                   tuple(np.asarray(R, dtype=float).tolist()), float(dt), method)


@lru_cache(maxsize=64)
def _terminal_weight_cached(params, v_ref, Q_state, R, dt, method):
    Q_state = np.array(Q_state)
    R = np.diag(R)
    x_lin = cruise_state(params, v_ref)
    _, A, B = vm.sensitivities(x_lin, np.zeros(NU), dt, _zero_curvature, params)
    reg = np.flatnonzero(Q_state > 0)
    free = np.flatnonzero(Q_state <= 0)
    if np.abs(A[np.ix_(reg, free)]).max(initial=0.0) > 1e-9:
        raise RiccatiError("regulated states depend on unweighted states at this point")
    Ar, Br, Qr = A[np.ix_(reg, reg)], B[reg], np.diag(Q_state[reg])
    Pr = solve_dare(Ar, Br, Qr, R, method)
    if not np.all(np.isfinite(Pr)) or dare_residual(Ar, Br, Qr, R, Pr) > 1e-8 * np.abs(Pr).max():
        raise RiccatiError("Riccati solution inaccurate")
    P = np.zeros((NX, NX))
    P[np.ix_(reg, reg)] = 0.5 * (Pr + Pr.T)
    P.setflags(write=False)
    return P


def _zero_curvature(s):
    return np.zeros_like(np.asarray(s, dtype=float))


# driving mode -------------------------------------------------------------------
@dataclass
class DrivingMode:
    """Blend state between the DRIVE (``lam = 0``) and OVERTAKE (``lam = 1``) tables."""

    target: Mode = Mode.DRIVE
    lam: float = 0.0
    t_blend: float = 1.0

    def advance(self, dt: float) -> float:
        goal = 1.0 if self.target == Mode.OVERTAKE else 0.0
        step = dt / self.t_blend if self.t_blend > 0 else 1.0
        if self.lam < goal:
            self.lam = min(goal, self.lam + step)
        elif self.lam > goal:
            self.lam = max(goal, self.lam - step)
        return self.lam

    @property
    def in_transition(self) -> bool:
        goal = 1.0 if self.target == Mode.OVERTAKE else 0.0
        return self.lam != goal


@dataclass(frozen=True)
class BehaviouralCommand:
    t: float = 0.0
    mode: Mode = Mode.DRIVE
    v_ref: float = 10.0
    y_ref: float = 0.0
    s_stop: float | None = None
    d_s: float | None = None
    d_y: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviouralCommand":
        return cls(t=float(d.get("t", 0.0)), mode=Mode(d.get("mode", "DRIVE")),
                   v_ref=float(d["v_ref"]), y_ref=float(d.get("y_ref", 0.0)),
                   s_stop=d.get("s_stop"), d_s=d.get("d_s"), d_y=d.get("d_y"))

    def to_dict(self) -> dict:
        return {"t": self.t, "mode": self.mode.value, "v_ref": self.v_ref, "y_ref": self.y_ref,
                "s_stop": self.s_stop, "d_s": self.d_s, "d_y": self.d_y}


@dataclass(frozen=True)
class HorizonConfig:
    N: int = 60
    dt: float = 0.05
    n_obs: int = 3
    a_comfort: float = 3.0
    activation_factor: float = 2.0
    soft: SoftPenaltyConfig = field(default_factory=SoftPenaltyConfig)
    cap_ratio: float = 0.8
    t_ramp: float = 0.3


# the OCP ---------------------------------------------------------------------
class OcpDefinition:
    """Problem data for one sub-planner cycle, plus the evaluation routines the
    multiple-shooting engine needs (batched over nodes)."""

    def __init__(self, *, N, dt, params, limits, road, obstacles, weights, x_ref,
                 v_cap, s_max, kappa_vel, soft, t0, active_rows, ellipse_d):
        self.N = N
        self.dt = dt
        self.nx = NX
        self.nu = NU
        self.params = params
        self.limits = limits
        self.road = road
        self.obstacles = tuple(obstacles)  # slot list, None for an empty slot
        self.weights = weights
        self.x_ref = x_ref  # (N+1, nh)
        self.v_cap = v_cap
        self.s_max = s_max
        self.kappa_vel = kappa_vel
        self.soft = soft
        self.t0 = t0
        self.active_rows = active_rows  # (N, n_obs*4) gating of obstacle rows
        self.ellipse_d = ellipse_d      # (n_obs, 2) default d_s, d_y
        self.n_obs = len(self.obstacles)
        self.rows_per_node = ROWS_PER_NODE_BASE + 4 * self.n_obs
        lb, ub = limits.control_bounds()
        self._u_lb = np.tile(lb, (N, 1))
        self._u_ub = np.tile(ub, (N, 1))

    # dynamics
    def curvature(self, s):
        return self.road.curvature_at(np.clip(s, self.road.s_min, self.road.s_max))

    def simulate(self, X, U):
        """Integrate every shooting interval; returns ``(X_next, A, B)``."""
        x1, A, B = vm.sensitivities(X[:-1].T, U.T, self.dt, self.curvature, self.params)
        return x1.T, A, B

    def u_bounds(self):
        return self._u_lb, self._u_ub

    # soft channels and their Jacobians
    def soft_channels(self, X):
        """Soft penalties ``(K, n_soft)`` and Jacobians ``(K, n_soft, nx)`` at states ``X``."""
        p, cfg = self.params, self.soft
        K = X.shape[0]
        C = np.zeros((K, n_soft(self.n_obs)))
        J = np.zeros((K, n_soft(self.n_obs), NX))
        s, y, xi, t = X[:, S], X[:, Y], X[:, XI], X[:, T]
        sig = np.array([1.0, -1.0])[:, None]
        es = s + sig * p.d_c * np.cos(xi)           # (2, K)
        ey = y + sig * p.d_c * np.sin(xi)
        des_dxi = -sig * p.d_c * np.sin(xi)
        dey_dxi = sig * p.d_c * np.cos(xi)
        tau = t - self.t0
        for j, obs in enumerate(self.obstacles):
            if obs is None:
                continue
            so, yo = predict_obstacle(obs, tau)
            psi = obs.heading
            os_ = so + sig * obs.d_c_obs * math.cos(psi)
            oy_ = yo + sig * obs.d_c_obs * math.sin(psi)
            dS = es[:, None, :] - os_[None, :, :]    # (ego, obs, K)
            dY = ey[:, None, :] - oy_[None, :, :]
            r = (p.rho_ego + obs.rho_obs) ** 2 - dS**2 - dY**2
            expo = np.minimum(cfg.kappa_obs * r, EXP_CLAMP)
            c = np.exp(expo).reshape(4, K)
            gs = (-2.0 * dS).reshape(4, K)
            gy = (-2.0 * dY).reshape(4, K)
            gxi = (-2.0 * dS * des_dxi[:, None, :] - 2.0 * dY * dey_dxi[:, None, :]).reshape(4, K)
            gt = (2.0 * dS * obs.Vs + 2.0 * dY * obs.Vy).reshape(4, K)
            base = SOFT_PER_OBSTACLE * j
            C[:, base:base + 4] = c.T
            for col, g in ((S, gs), (Y, gy), (XI, gxi), (T, gt)):
                J[:, base:base + 4, col] = (cfg.kappa_obs * c * g).T
            ds0, dy0 = self.ellipse_d[j]
            dsw, dyw = obs.ellipse_weights(tau, ds0, dy0)
            dsw_dt = np.where(ds0 - obs.d_s_rate * tau > ds0 * 0.05, -obs.d_s_rate, 0.0)
            dyw_dt = np.where(dy0 - obs.d_y_rate * tau > dy0 * 0.05, -obs.d_y_rate, 0.0)
            ds_, dy_ = s - so, y - yo
            ce = np.exp(cfg.kappa_safe * (-dsw * ds_**2 - dyw * dy_**2))
            C[:, base + 4] = ce
            J[:, base + 4, S] = ce * cfg.kappa_safe * (-2.0 * dsw * ds_)
            J[:, base + 4, Y] = ce * cfg.kappa_safe * (-2.0 * dyw * dy_)
            J[:, base + 4, T] = ce * cfg.kappa_safe * (
                2.0 * dsw * ds_ * obs.Vs + 2.0 * dyw * dy_ * obs.Vy
                - dsw_dt * ds_**2 - dyw_dt * dy_**2)
        hard, grads = self._boundary_hard(es, ey, des_dxi, dey_dxi)
        cb = np.exp(np.minimum(cfg.kappa_bound * hard, EXP_CLAMP))   # (4, K)
        base = SOFT_PER_OBSTACLE * self.n_obs
        C[:, base:base + 4] = cb.T
        for col, g in zip((S, Y, XI), grads):
            J[:, base:base + 4, col] = (cfg.kappa_bound * cb * g).T
        return C, J

    def _boundary_hard(self, es, ey, des_dxi, dey_dxi):
        """Road-edge residuals ``(4, K)`` and their gradients w.r.t. s, y, xi."""
        rho = self.params.rho_ego
        sc = np.clip(es, self.road.s_min, self.road.s_max)
        yl, yr = self.road.boundaries_at(sc)
        dl, dr = self.road.boundary_slopes_at(sc)
        left = rho + ey - yl
        right = rho - ey + yr
        hard = np.concatenate([left, right])
        g_s = np.concatenate([-dl, dr])
        g_y = np.concatenate([np.ones_like(left), -np.ones_like(right)])
        g_xi = np.concatenate([dey_dxi - dl * des_dxi, -dey_dxi + dr * des_dxi])
        return hard, (g_s, g_y, g_xi)

    def cost_model(self, X, U):
        """Gauss-Newton model: ``(Hx, qx, value)`` with ``Hx (N+1, nx, nx)``."""
        W = self.weights
        Qx, Qs = W.Q_state, W.Q_soft
        C, Jc = self.soft_channels(X)
        rx = X - self.x_ref[:, :NX]
        rs = C - self.x_ref[:, NX:]
        JtQ = np.swapaxes(Jc * Qs[:, None], 1, 2)
        Hx = np.matmul(JtQ, Jc)
        qx = np.matmul(JtQ, rs[:, :, None])[:, :, 0]
        Hx[:-1] += np.diag(Qx)
        qx[:-1] += rx[:-1] * Qx
        P = W.P if W.P is not None else np.diag(Qx)
        Hx[-1] += P
        qx[-1] += P @ rx[-1]
        value = 0.5 * (np.sum(rx[:-1] ** 2 * Qx) + rx[-1] @ P @ rx[-1]
                       + np.sum(rs**2 * Qs) + np.sum(U**2 * W.R))
        return Hx, qx, float(value)

    def residual_vector(self, X, U):
        """Stacked weighted residuals whose squared norm is twice the cost."""
        W = self.weights
        C, _ = self.soft_channels(X)
        rx = X - self.x_ref[:, :NX]
        rs = C - self.x_ref[:, NX:]
        P = W.P if W.P is not None else np.diag(W.Q_state)
        Lp = _psd_sqrt(P)
        parts = [(rx[:-1] * np.sqrt(W.Q_state)).ravel(), Lp @ rx[-1],
                 (rs * np.sqrt(W.Q_soft)).ravel(), (U * np.sqrt(W.R)).ravel()]
        return np.concatenate(parts)

    # hard path constraints
    def speed_cap(self, s):
        arg = self.kappa_vel * (self.s_max - s)
        th = np.tanh(arg)
        cap = self.v_cap * np.maximum(0.0, th)
        slope = np.where(th > 0, -self.v_cap * self.kappa_vel * (1.0 - th**2), 0.0)
        return cap, slope

    def constraint_rows(self, X, U):
        """Linearised path constraints on nodes 1..N.

        Returns ``(J, lo, hi)`` with ``J (N, rows_per_node, nx)``; a row reads
        ``lo <= J @ dx_k <= hi`` for the state correction ``dx_k``.
        """
        p, lim = self.params, self.limits
        Xn = X[1:]
        K = Xn.shape[0]
        R = self.rows_per_node
        J = np.zeros((K, R, NX))
        lo = np.full((K, R), -np.inf)
        hi = np.full((K, R), np.inf)
        # steering and torque boxes
        J[:, 0, DELTA] = 1.0
        lo[:, 0] = -lim.delta_max - Xn[:, DELTA]
        hi[:, 0] = lim.delta_max - Xn[:, DELTA]
        J[:, 1, TR] = 1.0
        lo[:, 1] = lim.Tr_min - Xn[:, TR]
        hi[:, 1] = lim.Tr_max - Xn[:, TR]
        # friction ellipse with the lateral acceleration lagged at the iterate
        vy_dot = vm.lateral_acceleration(Xn.T, p)
        root1 = np.sqrt(np.maximum(0.0, 1.0 - vy_dot**2 / p.b1**2))
        root2 = np.sqrt(np.maximum(0.0, 1.0 - vy_dot**2 / p.b2**2))
        scale = p.Rr * p.mass
        c0 = Xn[:, TR] + scale * _coupling(Xn.T, p)
        J[:, 2] = _coupling_jacobian(Xn, p) * scale
        J[:, 2, TR] += 1.0
        lo[:, 2] = -scale * p.a2 * root2 - c0
        hi[:, 2] = scale * p.a1 * root1 - c0
        # speed cap
        cap, slope = self.speed_cap(Xn[:, S])
        J[:, 3, VX] = 1.0
        J[:, 3, S] = -slope
        hi[:, 3] = cap - Xn[:, VX]
        # road edges
        sig = np.array([1.0, -1.0])[:, None]
        s, y, xi = Xn[:, S], Xn[:, Y], Xn[:, XI]
        es = s + sig * p.d_c * np.cos(xi)
        ey = y + sig * p.d_c * np.sin(xi)
        hard, (g_s, g_y, g_xi) = self._boundary_hard(es, ey, -sig * p.d_c * np.sin(xi),
                                                     sig * p.d_c * np.cos(xi))
        J[:, 4:8, S] = g_s.T
        J[:, 4:8, Y] = g_y.T
        J[:, 4:8, XI] = g_xi.T
        hi[:, 4:8] = -hard.T
        # obstacle circle pairs
        tau = Xn[:, T] - self.t0
        for j, obs in enumerate(self.obstacles):
            if obs is None:
                continue
            so, yo = predict_obstacle(obs, tau)
            psi = obs.heading
            os_ = so + sig * obs.d_c_obs * math.cos(psi)
            oy_ = yo + sig * obs.d_c_obs * math.sin(psi)
            dS = es[:, None, :] - os_[None, :, :]
            dY = ey[:, None, :] - oy_[None, :, :]
            r = ((p.rho_ego + obs.rho_obs) ** 2 - dS**2 - dY**2).reshape(4, K)
            des_dxi = (-sig * p.d_c * np.sin(xi))[:, None, :]
            dey_dxi = (sig * p.d_c * np.cos(xi))[:, None, :]
            rows = slice(ROWS_PER_NODE_BASE + 4 * j, ROWS_PER_NODE_BASE + 4 * j + 4)
            J[:, rows, S] = (-2.0 * dS).reshape(4, K).T
            J[:, rows, Y] = (-2.0 * dY).reshape(4, K).T
            J[:, rows, XI] = (-2.0 * dS * des_dxi - 2.0 * dY * dey_dxi).reshape(4, K).T
            J[:, rows, T] = (2.0 * dS * obs.Vs + 2.0 * dY * obs.Vy).reshape(4, K).T
            gate = self.active_rows[:, 4 * j:4 * j + 4]
            hi[:, rows] = np.where(gate, -r.T, np.inf)
        return J, lo, hi

    def path_violation(self, X) -> dict:
        """Nonlinear constraint residuals of a trajectory (positive = violated)."""
        J, lo, hi = self.constraint_rows(X, None)
        viol = np.maximum(-hi, lo)  # at dx = 0
        viol = np.where(np.isfinite(viol), viol, -np.inf)
        names = ["delta", "Tr", "ellipse", "speed"] + ["edge"] * 4 + ["obstacle"] * (4 * self.n_obs)
        out = {}
        for k, name in enumerate(names):
            out[name] = max(out.get(name, -np.inf), float(viol[:, k].max()))
        return out


def _psd_sqrt(P):
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return (V * np.sqrt(np.maximum(w, 0.0))).T


def _coupling(x, p):
    f_fc, _, _, f_aero = vm.tyre_forces(x, p)
    return x[OMEGA] * x[VY] - f_fc * np.sin(x[DELTA]) / p.mass - f_aero / p.mass


def _coupling_jacobian(Xn, p):
    """Central differences of the ellipse coupling term, ``(K, nx)``."""
    K = Xn.shape[0]
    out = np.zeros((K, NX))
    for col in (VX, VY, OMEGA, DELTA):
        h = 1e-6 * np.maximum(1.0, np.abs(Xn[:, col]))
        xp = Xn.copy()
        xm = Xn.copy()
        xp[:, col] += h
        xm[:, col] -= h
        out[:, col] = (_coupling(xp.T, p) - _coupling(xm.T, p)) / (2.0 * h)
    return out


# assembly ----------------------------------------------------------------------
def select_obstacles(obstacles, X, t0, n_obs, params):
    """Keep the ``n_obs`` obstacles closest to the predicted trajectory ``X``."""
    scored = []
    tau = X[:, T] - t0
    for i, obs in enumerate(obstacles):
        so, yo = predict_obstacle(obs, tau)
        d = np.sqrt((X[:, S] - so) ** 2 + (X[:, Y] - yo) ** 2).min()
        scored.append((float(d), i))
    scored.sort()
    chosen = [obstacles[i] for _, i in scored[:n_obs]]
    return chosen + [None] * (n_obs - len(chosen))


def obstacle_gates(slots, X, t0, params, factor):
    """Per-node activation of circle-pair rows (distance below ``factor`` times the
    contact radius); ``(N, 4 * n_obs)`` booleans for nodes 1..N."""
    Xn = X[1:]
    K = Xn.shape[0]
    gates = np.zeros((K, 4 * len(slots)), dtype=bool)
    sig = np.array([1.0, -1.0])[:, None]
    es = Xn[:, S] + sig * params.d_c * np.cos(Xn[:, XI])
    ey = Xn[:, Y] + sig * params.d_c * np.sin(Xn[:, XI])
    tau = Xn[:, T] - t0
    for j, obs in enumerate(slots):
        if obs is None:
            continue
        so, yo = predict_obstacle(obs, tau)
        os_ = so + sig * obs.d_c_obs * math.cos(obs.heading)
        oy_ = yo + sig * obs.d_c_obs * math.sin(obs.heading)
        dist = np.sqrt((es[:, None, :] - os_[None, :, :]) ** 2
                       + (ey[:, None, :] - oy_[None, :, :]) ** 2).reshape(4, K)
        gates[:, 4 * j:4 * j + 4] = (dist < factor * (params.rho_ego + obs.rho_obs)).T
    return gates


def speed_cap_parameters(x0, command: BehaviouralCommand, horizon_length: float,
                         a_comfort: float, cap_ratio: float = 0.8, t_ramp: float = 0.3):
    """``(v_cap, s_max, kappa_vel)`` for a sub-planner with the given spatial horizon.

    The cap level sits above both the reference and the current speed
    (``cap_ratio`` below one). The sharpness is the comfort value unless the
    horizon is too short, in which case it is raised until the current speed
    stays admissible for ``t_ramp`` seconds of travel, the time the torque
    needs to build up braking.
    """
    vx0 = max(float(x0[VX]), 0.0)
    v_cap = max(command.v_ref, vx0, 0.1) / cap_ratio
    s_max = float(x0[S]) + max(horizon_length, 1e-3)
    if command.s_stop is not None:
        s_max = min(s_max, float(command.s_stop))
    dist = s_max - float(x0[S])
    reach = max(dist - vx0 * t_ramp, 0.5 * dist, 1e-3)
    kappa = kappa_vel_for_comfort(v_cap, a_comfort)
    if vx0 > 0:
        kappa = max(kappa, math.atanh(min(vx0 / v_cap, cap_ratio)) / reach)
    return v_cap, s_max, kappa


def conform_to_speed_cap(X, v_cap: float, s_max: float, kappa: float, dt: float,
                         margin: float = 0.98, tol: float = 0.05):
    """Warm-start repair: clip speeds to the cap and re-integrate the abscissa.

    Returns ``X`` unchanged when it already respects the cap within ``tol``.
    """
    X = np.array(X, dtype=float)
    cap = v_cap * np.maximum(0.0, np.tanh(kappa * (s_max - X[:, S])))
    if np.all(X[:, VX] <= cap + tol):
        return X
    s = X[0, S]
    for k in range(1, X.shape[0]):
        v_prev = X[k - 1, VX]
        s = s + max(v_prev, 0.0) * dt
        X[k, S] = s
        cap_k = margin * v_cap * max(0.0, math.tanh(kappa * (s_max - s)))
        X[k, VX] = min(X[k, VX], cap_k)
    return X


def build_ocp(x0, road: RoadMap, obstacles, command: BehaviouralCommand, config: HorizonConfig,
              weights: WeightSet, params: VehicleParams, limits: ActuatorLimits,
              horizon_length: float, X_guess=None) -> OcpDefinition:
    """Assemble the OCP for one sub-planner.

    ``X_guess`` (``(N+1, nx)``) is the trajectory used to pick the obstacle
    slots and gate obstacle rows; it defaults to constant-speed cruising.
    """
    x0 = np.asarray(x0, dtype=float)
    N, dt = config.N, config.dt
    t0 = float(x0[T])
    if X_guess is None:
        X_guess = np.tile(x0, (N + 1, 1))
        X_guess[:, T] = t0 + dt * np.arange(N + 1)
        X_guess[:, S] = x0[S] + x0[VX] * dt * np.arange(N + 1)
    road._locate(x0[S])  # raises OutOfMapError when the start is off-map

    slots = select_obstacles(list(obstacles), X_guess, t0, config.n_obs, params)
    gates = obstacle_gates(slots, X_guess, t0, params, config.activation_factor)
    ds_default = command.d_s if command.d_s is not None else config.soft.d_s
    dy_default = command.d_y if command.d_y is not None else config.soft.d_y
    ellipse_d = np.array([[ds_default, dy_default]] * config.n_obs)

    nh = NX + n_soft(config.n_obs)
    x_ref = np.zeros((N + 1, nh))
    times = dt * np.arange(N + 1)
    x_ref[:, Y] = command.y_ref
    x_ref[:, VX] = command.v_ref
    x_ref[:, S] = x0[S] + command.v_ref * times
    x_ref[:, T] = t0 + times
    v_cap, s_max, kappa = speed_cap_parameters(x0, command, horizon_length, config.a_comfort,
                                              config.cap_ratio, config.t_ramp)
    return OcpDefinition(N=N, dt=dt, params=params, limits=limits, road=road, obstacles=slots,
                         weights=weights, x_ref=x_ref, v_cap=v_cap, s_max=s_max,
                         kappa_vel=kappa, soft=config.soft, t0=t0, active_rows=gates,
                         ellipse_d=ellipse_d)


def with_terminal(weights: WeightSet, params: VehicleParams, v_ref: float, dt: float) -> WeightSet:
    P = terminal_weight(params, v_ref, weights.Q_state, weights.R, dt)
    return replace(weights, P=np.array(P))
