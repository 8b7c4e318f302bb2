"""Obstacle, road-boundary and velocity-profile constraints.

Hard residuals follow the convention ``g <= 0`` is feasible. Each soft penalty
is ``exp(kappa * g)`` of its paired hard residual, so it equals one exactly
when the hard constraint becomes active. All functions broadcast over arrays
of ego positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXP_CLAMP = 30.0


@dataclass(frozen=True)
class Obstacle:
    s0: float
    y0: float
    Vs: float = 0.0
    Vy: float = 0.0
    rho_obs: float = 1.2
    d_c_obs: float = 1.1
    static_heading: float = 0.0
    d_s: float | None = None
    d_y: float | None = None
    d_s_rate: float = 0.0
    d_y_rate: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not self.rho_obs > 0:
            raise ValueError("obstacle radius must be positive")

    @property
    def heading(self) -> float:
        if self.Vs == 0.0 and self.Vy == 0.0:
            return self.static_heading
        return math.atan(self.Vy / self.Vs) if self.Vs != 0.0 else math.copysign(
            0.5 * math.pi, self.Vy)

    def moved(self, dt: float) -> "Obstacle":
        s, y = predict_obstacle(self, dt)
        return Obstacle(float(s), float(y), self.Vs, self.Vy, self.rho_obs, self.d_c_obs,
                        self.static_heading, self.d_s, self.d_y, self.d_s_rate,
                        self.d_y_rate, self.name)

    def ellipse_weights(self, t, default_ds: float, default_dy: float):
        """Safety-ellipse weights at prediction time ``t``; they shrink linearly
        with the configured rates to grow the ellipse with uncertainty."""
        ds = default_ds if self.d_s is None else self.d_s
        dy = default_dy if self.d_y is None else self.d_y
        t = np.asarray(t, dtype=float)
        return (np.maximum(ds * 0.05, ds - self.d_s_rate * t),
                np.maximum(dy * 0.05, dy - self.d_y_rate * t))


@dataclass(frozen=True)
class SoftPenaltyConfig:
    kappa_obs: float = 0.5   # 1/m^2, circle-pair penalties
    kappa_bound: float = 4.0  # 1/m, road-boundary penalties
    kappa_safe: float = 1.0   # scales the safety-ellipse exponent
    d_s: float = 1.0 / 64.0   # 1/m^2
    d_y: float = 1.0 / 2.25   # 1/m^2
    w_obs: float = 20.0
    w_safe: float = 10.0
    w_bound: float = 5.0

    def __post_init__(self):
        for name in ("kappa_obs", "kappa_bound", "kappa_safe", "d_s", "d_y"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def predict_obstacle(obs: Obstacle, t):
    """Constant-velocity prediction in the road frame."""
    t = np.asarray(t, dtype=float)
    return obs.s0 + obs.Vs * t, obs.y0 + obs.Vy * t


def circle_centers(s, y, heading, offset: float, count: int = 2):
    """Circle centres along the body axis.

    Returns arrays of shape ``(count,) + broadcast shape`` for ``s`` and
    ``y``. With two circles the centres sit at ``+offset`` and ``-offset``.
    """
    s, y, heading = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (s, y, heading)))
    if count == 1:
        signs = np.array([0.0])
    else:
        signs = np.linspace(1.0, -1.0, count)
    shape = (count,) + (1,) * s.ndim
    signs = signs.reshape(shape)
    return s + signs * offset * np.cos(heading), y + signs * offset * np.sin(heading)


def obstacle_hard_residuals(ego_s, ego_y, obs_s, obs_y, rho_ego: float, rho_obs: float):
    """``(rho_ego + rho_obs)^2 - distance^2`` for every ego/obstacle circle pair.

    Circle arrays have the circle index first; the result has shape
    ``(n_ego * n_obs, ...)`` ordered ego-major.
    """
    ego_s, ego_y = np.asarray(ego_s), np.asarray(ego_y)
    obs_s, obs_y = np.asarray(obs_s), np.asarray(obs_y)
    ds = ego_s[:, None] - obs_s[None, :]
    dy = ego_y[:, None] - obs_y[None, :]
    res = (rho_ego + rho_obs) ** 2 - ds**2 - dy**2
    return res.reshape((-1,) + res.shape[2:])


def exp_penalty(residual, kappa: float):
    return np.exp(np.minimum(kappa * np.asarray(residual, dtype=float), EXP_CLAMP))


def obstacle_soft_penalty(ego_s, ego_y, obs_s, obs_y, rho_ego, rho_obs, kappa_pen):
    if not kappa_pen > 0:
        raise ValueError("kappa_pen must be positive")
    return exp_penalty(obstacle_hard_residuals(ego_s, ego_y, obs_s, obs_y, rho_ego, rho_obs),
                       kappa_pen)


def safety_ellipse_penalty(ego_s, ego_y, obs_s, obs_y, d_s, d_y, kappa_pen):
    """Elliptic proximity penalty on the centre-of-mass pair; one at coincidence."""
    ds = np.asarray(ego_s) - np.asarray(obs_s)
    dy = np.asarray(ego_y) - np.asarray(obs_y)
    return np.exp(kappa_pen * (-d_s * ds**2 - d_y * dy**2))


def boundary_residuals(ego_s, ego_y, rho_ego: float, road, kappa_pen: float):
    """Hard residuals and soft penalties for the road edges.

    ``ego_s``/``ego_y`` are circle-centre arrays (circle index first). Returns
    ``(hard, soft)``, each of shape ``(2 * n_circles, ...)``: left-edge rows for
    every circle, then right-edge rows.
    """
    yl, yr = road.boundaries_at(ego_s)
    left = rho_ego + (np.asarray(ego_y) - yl)
    right = rho_ego - (np.asarray(ego_y) - yr)
    hard = np.concatenate([left, right], axis=0)
    return hard, exp_penalty(hard, kappa_pen)


def velocity_profile_bound(s, v_ref: float, s_max: float, kappa_vel: float):
    """Speed cap that decays to zero at ``s_max``."""
    if not kappa_vel > 0:
        raise ValueError("kappa_vel must be positive")
    return v_ref * np.maximum(0.0, np.tanh(kappa_vel * (s_max - np.asarray(s, dtype=float))))


# max over x of tanh(x) * sech(x)^2, reached at tanh(x)^2 = 1/3
_PROFILE_DECEL_PEAK = 2.0 / (3.0 * math.sqrt(3.0))


def profile_peak_deceleration(v_ref: float, kappa_vel: float) -> float:
    """Largest deceleration ``|V dV/ds|`` implied by the speed cap."""
    return _PROFILE_DECEL_PEAK * kappa_vel * v_ref**2


def kappa_vel_for_comfort(v_ref: float, a_comfort: float) -> float:
    """Sharpness whose implied peak deceleration equals ``a_comfort``."""
    return a_comfort / (_PROFILE_DECEL_PEAK * v_ref**2)
