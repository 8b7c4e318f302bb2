"""Single-track vehicle model in the curvilinear s-y frame.

State vector layout (9 entries)::

    s, y, xi, Vx, Vy, omega, delta, Tr, t

Controls are the steering rate ``u1`` and torque rate ``u2``. All model
functions broadcast over trailing axes, so ``x`` may be ``(9,)`` or
``(9, K)`` for K independent evaluations.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

S, Y, XI, VX, VY, OMEGA, DELTA, TR, T = range(9)
NX = 9
NU = 2
STATE_NAMES = ("s", "y", "xi", "Vx", "Vy", "omega", "delta", "Tr", "t")
GRAVITY = 9.81


class SlipDomainError(ValueError):
    """Standard slip formula evaluated where its denominator vanishes."""


class SingularityError(ValueError):
    """Vehicle sits at the local centre of curvature of the road."""


class IntegrationError(RuntimeError):
    """Implicit integrator failed to converge."""


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1200.0
    Jz: float = 1500.0
    lf: float = 1.2
    lr: float = 1.3
    Rr: float = 0.3
    B: float = 10.0
    C: float = 1.5
    D: float = 0.6 * 1200.0 * GRAVITY / 2.0
    E: float = 0.97
    c_aero: float = 0.4
    a1: float = 3.0
    a2: float = 8.0
    b1: float = 8.0
    b2: float = 8.0
    kappa_slip: float = 2.0
    eps0: float = 0.4
    rho_ego: float = 1.2
    d_c: float = 1.1

    def __post_init__(self):
        positive = ("mass", "Jz", "lf", "lr", "Rr", "D", "a1", "a2", "b1", "b2",
                    "eps0", "kappa_slip", "rho_ego")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"vehicle parameter {name} must be positive")

    def perturbed(self, **factors: float) -> "VehicleParams":
        """Copy with multiplicative factors applied, e.g. ``mass=1.1``."""
        values = asdict(self)
        for name, factor in factors.items():
            if factor <= 0:
                raise ValueError(f"perturbation factor for {name} must be positive")
            values[name] *= factor
        return VehicleParams(**values)


@dataclass(frozen=True)
class ActuatorLimits:
    """Box limits on steering/torque and on their rates."""

    delta_max: float = 0.5
    Tr_min: float = -3000.0
    Tr_max: float = 1200.0
    delta_rate_max: float = 0.5
    Tr_rate_max: float = 6000.0

    def state_bounds(self):
        lb = np.full(NX, -np.inf)
        ub = np.full(NX, np.inf)
        lb[DELTA], ub[DELTA] = -self.delta_max, self.delta_max
        lb[TR], ub[TR] = self.Tr_min, self.Tr_max
        return lb, ub

    def control_bounds(self):
        ub = np.array([self.delta_rate_max, self.Tr_rate_max])
        return -ub, ub


def load_params(path) -> tuple[VehicleParams, ActuatorLimits]:
    """Read a JSON parameter file; unknown keys are rejected."""
    doc = json.loads(Path(path).read_text())
    return params_from_dict(doc)


def params_from_dict(doc: dict) -> tuple[VehicleParams, ActuatorLimits]:
    doc = dict(doc)
    limits = ActuatorLimits(**doc.pop("limits", {}))
    known = {f.name for f in fields(VehicleParams)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
    return VehicleParams(**doc), limits


def params_to_dict(params: VehicleParams, limits: ActuatorLimits | None = None) -> dict:
    doc = asdict(params)
    if limits is not None:
        doc["limits"] = asdict(limits)
    return doc


@dataclass
class VehicleState:
    s: float = 0.0
    y: float = 0.0
    xi: float = 0.0
    Vx: float = 0.0
    Vy: float = 0.0
    omega: float = 0.0
    delta: float = 0.0
    Tr: float = 0.0
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.y, self.xi, self.Vx, self.Vy, self.omega,
                         self.delta, self.Tr, self.t], dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*(float(v) for v in np.asarray(x, dtype=float)[:NX]))


def _vec(x) -> np.ndarray:
    if isinstance(x, VehicleState):
        return x.as_array()
    return np.asarray(x, dtype=float)


def slip_angles_standard(x, p: VehicleParams):
    """Classical slip angles; singular as Vx goes to zero."""
    x = _vec(x)
    vx, vy, om, de = x[VX], x[VY], x[OMEGA], x[DELTA]
    vf = vy + om * p.lf
    num_f = vf * np.cos(de) - vx * np.sin(de)
    den_f = vx * np.cos(de) + vf * np.sin(de)
    if np.any(np.abs(den_f) < 1e-9) or np.any(np.abs(vx) < 1e-9):
        raise SlipDomainError("standard slip angles undefined near zero speed")
    return np.arctan(num_f / den_f), np.arctan((vy - om * p.lr) / vx)


def slip_angles_modified(x, p: VehicleParams):
    """Slip angles regularised for low speed; exactly zero at Vx = 0."""
    x = _vec(x)
    vx, vy, om, de = x[VX], x[VY], x[OMEGA], x[DELTA]
    vf = vy + om * p.lf
    shaping = vx * np.tanh(p.kappa_slip * vx)
    num_f = (vf * np.cos(de) - vx * np.sin(de)) * shaping
    den_f = (vx * np.cos(de) + vf * np.sin(de)) * vx + p.eps0
    num_r = (vy - om * p.lr) * shaping
    den_r = vx * vx + p.eps0
    # den_f can cross zero for extreme states; arctan2 keeps the map finite there
    alpha_f = np.where(den_f > 0, np.arctan(num_f / np.where(den_f > 0, den_f, 1.0)),
                       np.arctan2(num_f, den_f))
    return alpha_f, np.arctan(num_r / den_r)


def lateral_force(alpha, p: VehicleParams):
    """Axle lateral force from the simplified Magic Formula (two tyres)."""
    ba = p.B * np.asarray(alpha, dtype=float)
    return -2.0 * p.D * np.sin(p.C * np.arctan(ba + p.E * (np.arctan(ba) - ba)))


def aero_force(vx, p: VehicleParams):
    return p.c_aero * vx * np.abs(vx)


def tyre_forces(x, p: VehicleParams):
    """Return ``(F_fc, F_rc, F_rl, F_aero)`` for state(s) ``x``."""
    x = _vec(x)
    alpha_f, alpha_r = slip_angles_modified(x, p)
    return (lateral_force(alpha_f, p), lateral_force(alpha_r, p),
            x[TR] / p.Rr, aero_force(x[VX], p))


def dynamics(x, u, curvature, p: VehicleParams, hold_speed: bool = False):
    """Continuous-time state derivative.

    ``curvature`` is the centreline curvature at the current ``s`` (scalar or
    broadcastable array). ``hold_speed`` zeroes the longitudinal acceleration,
    which reproduces constant-speed steering tests.
    """
    x = _vec(x)
    u = np.asarray(u, dtype=float)
    curvature = np.asarray(curvature, dtype=float)
    y, xi, vx, vy, om, de = x[Y], x[XI], x[VX], x[VY], x[OMEGA], x[DELTA]
    scale = 1.0 - curvature * y
    if np.any(np.abs(scale) < 1e-6):
        raise SingularityError("1 - curvature*y vanished")
    f_fc, f_rc, f_rl, f_aero = tyre_forces(x, p)
    sin_d, cos_d = np.sin(de), np.cos(de)
    s_dot = (vx * np.cos(xi) - vy * np.sin(xi)) / scale
    dx = np.empty((NX,) + np.broadcast(x[0], u[0], curvature).shape)
    dx[S] = s_dot
    dx[Y] = vx * np.sin(xi) + vy * np.cos(xi)
    dx[XI] = om - curvature * s_dot
    if hold_speed:
        dx[VX] = 0.0
    else:
        dx[VX] = om * vy + (f_rl - f_fc * sin_d - f_aero) / p.mass
    dx[VY] = -om * vx + (f_rc + f_fc * cos_d) / p.mass
    dx[OMEGA] = (-f_rc * p.lr + f_fc * p.lf * cos_d) / p.Jz
    dx[DELTA] = u[0]
    dx[TR] = u[1]
    dx[T] = 1.0
    return dx


def lateral_acceleration(x, p: VehicleParams):
    """Body-frame lateral velocity derivative, the ``Vy_dot`` of the friction ellipse."""
    x = _vec(x)
    f_fc, f_rc, _, _ = tyre_forces(x, p)
    return -x[OMEGA] * x[VX] + (f_rc + f_fc * np.cos(x[DELTA])) / p.mass


def friction_ellipse_bounds(x, vy_dot, p: VehicleParams):
    """Torque interval allowed by the acceleration ellipse.

    The square-root arguments are clamped at zero so that the bounds stay
    defined when ``|vy_dot|`` exceeds ``b1``/``b2``.
    """
    x = _vec(x)
    f_fc, _, _, f_aero = tyre_forces(x, p)
    coupling = x[OMEGA] * x[VY] - f_fc * np.sin(x[DELTA]) / p.mass - f_aero / p.mass
    vy_dot = np.asarray(vy_dot, dtype=float)
    root1 = np.sqrt(np.maximum(0.0, 1.0 - vy_dot**2 / p.b1**2))
    root2 = np.sqrt(np.maximum(0.0, 1.0 - vy_dot**2 / p.b2**2))
    scale = p.Rr * p.mass
    return scale * (-p.a2 * root2 - coupling), scale * (p.a1 * root1 - coupling)


def _fd_jacobian(fun, x, u, eps_rel=1e-6):
    """Central-difference Jacobians of ``fun(x, u)`` for batched columns.

    ``x`` is ``(nx, K)``, ``u`` is ``(nu, K)``. Returns ``(K, nf, nx)`` and
    ``(K, nf, nu)``.
    """
    nx, k = x.shape
    nu = u.shape[0]
    nz = nx + nu
    z = np.vstack([x, u])
    step = eps_rel * np.maximum(1.0, np.abs(z))
    # columns ordered (direction, sign, batch)
    zz = np.repeat(z[:, None, None, :], nz, axis=1).repeat(2, axis=2).copy()
    idx = np.arange(nz)
    zz[idx, idx, 0, :] += step
    zz[idx, idx, 1, :] -= step
    flat = zz.reshape(nz, -1)
    out = fun(flat[:nx], flat[nx:])
    nf = out.shape[0]
    out = out.reshape(nf, nz, 2, k)
    jac = (out[:, :, 0, :] - out[:, :, 1, :]) / (2.0 * step[None, :, :])
    jac = np.transpose(jac, (2, 0, 1))
    return jac[:, :, :nx], jac[:, :, nx:]


def implicit_midpoint_step(f: Callable, x0, u, h: float, tol: float = 1e-10,
                           max_iter: int = 20):
    """One implicit midpoint step ``x1 = x0 + h f((x0 + x1)/2, u)``.

    ``f(x, u)`` must accept column batches ``(nx, K)``. Newton iterations use a
    finite-difference Jacobian taken at the explicit Euler predictor and
    refreshed whenever an iteration shrinks the residual by less than a factor
    of ten.
    Returns ``x1`` with the same shape as ``x0``.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x0.ndim == 1
    xb = x0[:, None] if single else x0
    ub = u[:, None] if single else u
    if ub.shape[1] != xb.shape[1]:
        ub = np.broadcast_to(ub, (ub.shape[0], xb.shape[1]))
    nx, k = xb.shape
    x1 = xb + h * f(xb, ub)
    jx, _ = _fd_jacobian(f, 0.5 * (xb + x1), ub)
    newton = np.eye(nx)[None] - 0.5 * h * jx
    prev = np.inf
    for _ in range(max_iter):
        res = x1 - xb - h * f(0.5 * (xb + x1), ub)
        err = np.max(np.abs(res) / np.maximum(1.0, np.abs(x1)))
        if err < tol:
            break
        if err > 0.1 * prev:
            # chord iteration stalls where the slip model bends hard (low speed)
            jx, _ = _fd_jacobian(f, 0.5 * (xb + x1), ub)
            newton = np.eye(nx)[None] - 0.5 * h * jx
        prev = err
        x1 = x1 - np.linalg.solve(newton, res.T[:, :, None])[:, :, 0].T
    else:
        res = x1 - xb - h * f(0.5 * (xb + x1), ub)
        if not np.max(np.abs(res) / np.maximum(1.0, np.abs(x1))) < tol:
            raise IntegrationError("implicit midpoint Newton iteration did not converge")
    return x1[:, 0] if single else x1


def midpoint_sensitivities(f: Callable, x0, u, x1, h: float):
    """Jacobians of the implicit midpoint map at a converged step.

    Differentiates ``x1 - x0 - h f((x0+x1)/2, u) = 0`` implicitly. Works on
    batches: ``x0``/``x1`` ``(nx, K)``, ``u`` ``(nu, K)``; returns
    ``A (K, nx, nx)`` and ``B (K, nx, nu)``.
    """
    mid = 0.5 * (x0 + x1)
    jx, ju = _fd_jacobian(f, mid, u)
    nx = x0.shape[0]
    eye = np.eye(nx)[None]
    lhs = eye - 0.5 * h * jx
    a = np.linalg.solve(lhs, eye + 0.5 * h * jx)
    b = np.linalg.solve(lhs, h * ju)
    return a, b


def _model_fn(curvature_fn, p, hold_speed=False):
    def f(x, u):
        return dynamics(x, u, curvature_fn(x[S]), p, hold_speed=hold_speed)
    return f


def integrate_step(x, u, h: float, curvature_fn: Callable, p: VehicleParams,
                   hold_speed: bool = False):
    """Advance the vehicle model by ``h`` seconds with the implicit midpoint rule.

    ``curvature_fn`` maps abscissa arrays to curvature. Time advances exactly
    by ``h``.
    """
    x = _vec(x)
    x1 = implicit_midpoint_step(_model_fn(curvature_fn, p, hold_speed), x, u, h)
    x1[T] = x[T] + h
    return x1


def sensitivities(x, u, h: float, curvature_fn: Callable, p: VehicleParams):
    """Return ``(x_next, A, B)`` for the implicit midpoint step.

    Batched: ``x`` ``(9, K)`` and ``u`` ``(2, K)`` give ``A (K, 9, 9)``. For a
    single state the leading batch axis is dropped.
    """
    x = _vec(x)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    xb = x[:, None] if single else x
    ub = u[:, None] if single else u
    f = _model_fn(curvature_fn, p)
    x1 = implicit_midpoint_step(f, xb, ub, h)
    x1[T] = xb[T] + h
    a, b = midpoint_sensitivities(f, xb, ub, x1, h)
    if single:
        return x1[:, 0], a[0], b[0]
    return x1, a, b


def rk4_step(x, u, h: float, curvature_fn: Callable, p: VehicleParams,
             hold_speed: bool = False):
    """Classical explicit fourth-order step (used for the plant)."""
    x = _vec(x)

    def f(z):
        return dynamics(z, u, curvature_fn(z[S]), p, hold_speed=hold_speed)

    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[T] = x[T] + h
    return out


def kinematic_path(v: float, delta: float, duration: float, p: VehicleParams,
                   n: int = 3001):
    """C.o.M. path of the kinematic single-track model at constant body speed ``v``.

    ``v`` is the body-frame longitudinal speed; the C.o.M. moves on a circle
    with sideslip ``beta = atan(lr tan(delta) / L)``. Returns ``(t, X, Y)``.
    """
    wheelbase = p.lf + p.lr
    beta = math.atan(p.lr * math.tan(delta) / wheelbase)
    yaw_rate = v * math.tan(delta) / wheelbase
    speed = v / math.cos(beta)
    t = np.linspace(0.0, duration, n)
    heading = yaw_rate * t
    if abs(yaw_rate) < 1e-12:
        return t, speed * t * math.cos(beta), speed * t * math.sin(beta)
    x = speed / yaw_rate * (np.sin(heading + beta) - math.sin(beta))
    y = speed / yaw_rate * (math.cos(beta) - np.cos(heading + beta))
    return t, x, y
