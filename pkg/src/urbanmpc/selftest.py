"""Quick invariant checks behind ``urbanmpc --mode self-test``.

Each check returns ``(ok, detail)``. They are small versions of the test
suite that run in a few seconds without pytest.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from . import vehicle as vm
from .ocp import Mode, BehaviouralCommand, cruise_state, solve_dare
from .qp import ActiveSetQpSolver, DenseQp
from .rti import LinearQuadraticProblem, RtiEngine, ShootingIterate, shift
from .vehicle import ActuatorLimits, VehicleParams


def enumerate_qp(qp: DenseQp, tol: float = 1e-9):
    """Brute-force optimum of a small strictly convex QP.

    Every subset of constraint rows (bounds included), with each member
    pinned at one of its finite sides, defines an equality QP. The optimum is
    the best primal-feasible candidate. Cost grows like ``3^(n+m)``.
    """
    n = qp.n
    rows = np.vstack([np.eye(n), qp.A])
    lo = np.concatenate([qp.lb, qp.lbA])
    hi = np.concatenate([qp.ub, qp.ubA])
    options = []
    for i in range(rows.shape[0]):
        sides = [None]
        if np.isfinite(lo[i]):
            sides.append(lo[i])
        if np.isfinite(hi[i]) and hi[i] != lo[i]:
            sides.append(hi[i])
        options.append(sides)
    best_x, best_f = None, math.inf
    for choice in itertools.product(*options):
        act = [i for i, v in enumerate(choice) if v is not None]
        if len(act) > n:
            continue
        Aa = rows[act]
        ba = np.array([choice[i] for i in act])
        k = len(act)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = qp.H
        K[:n, n:] = Aa.T
        K[n:, :n] = Aa
        try:
            sol = np.linalg.solve(K, np.concatenate([-qp.g, ba]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        v = rows @ x
        scale = 1.0 + np.abs(v)
        if np.any(v < lo - tol * scale) or np.any(v > hi + tol * scale):
            continue
        f = 0.5 * x @ qp.H @ x + qp.g @ x
        if f < best_f - 1e-14:
            best_x, best_f = x, f
    return best_x, best_f


def random_qp(rng, n: int, m: int, box: bool = True) -> DenseQp:
    """Random strictly convex QP with a nonempty feasible set around a known point."""
    M = rng.standard_normal((n, n))
    H = M @ M.T + n * 0.1 * np.eye(n)
    g = rng.standard_normal(n) * 3
    A = rng.standard_normal((m, n))
    x_in = rng.standard_normal(n) * 0.3
    v = A @ x_in
    lbA = v - rng.uniform(0.05, 1.0, m)
    ubA = v + rng.uniform(0.05, 1.0, m)
    lbA[rng.random(m) < 0.3] = -np.inf
    ubA[rng.random(m) < 0.3] = np.inf
    lb = ub = None
    if box:
        lb = x_in - rng.uniform(0.2, 1.5, n)
        ub = x_in + rng.uniform(0.2, 1.5, n)
    return DenseQp(H, g, lb, ub, A, lbA, ubA)


def check_equilibrium():
    p = VehicleParams()
    x = cruise_state(p, 10.0)
    dx = vm.dynamics(x, np.zeros(2), 0.0, p)
    worst = float(np.abs(dx[[vm.Y, vm.XI, vm.VX, vm.VY, vm.OMEGA, vm.DELTA, vm.TR]]).max())
    return worst < 1e-9, f"max drift {worst:.2e}"


def check_integrator_order():
    p = VehicleParams()
    x0 = cruise_state(p, 8.0)
    u = np.array([0.2, 50.0])
    flat = lambda s: 0.0 * s  # noqa: E731

    def run(h, steps):
        x = x0.copy()
        for _ in range(steps):
            x = vm.integrate_step(x, u, h, flat, p)
        return x

    ref = run(0.5 / 256, 256)
    errs = [np.linalg.norm(run(0.5 / k, k) - ref) for k in (4, 8, 16)]
    slopes = np.diff(np.log2(errs)) * -1
    return bool(np.all((slopes > 1.8) & (slopes < 2.2))), f"slopes {np.round(slopes, 3)}"


def check_sensitivities():
    p = VehicleParams()
    x = cruise_state(p, 9.0)
    x[vm.DELTA], x[vm.VY], x[vm.OMEGA] = 0.03, 0.1, 0.05
    u = np.array([0.1, 30.0])
    curv = lambda s: 0.01 + 0.0 * s  # noqa: E731
    _, A, B = vm.sensitivities(x[:, None], u[:, None], 0.05, curv, p)
    fd = np.empty((vm.NX, vm.NX))
    for j in range(vm.NX):
        e = np.zeros(vm.NX)
        e[j] = 1e-6 * max(1.0, abs(x[j]))
        fd[:, j] = (vm.integrate_step(x + e, u, 0.05, curv, p)
                    - vm.integrate_step(x - e, u, 0.05, curv, p)) / (2 * e[j])
    err = float(np.abs(A[0] - fd).max())
    return err < 1e-5, f"max |A - FD| {err:.1e}"


def check_qp_enumeration(count: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    solver = ActiveSetQpSolver()
    worst = 0.0
    for _ in range(count):
        qp = random_qp(rng, 3, 3)
        sol = solver.solve(qp)
        x_ref, _ = enumerate_qp(qp)
        worst = max(worst, float(np.abs(sol.x - x_ref).max()))
    return worst < 1e-6, f"max deviation {worst:.1e}"


def check_dare_methods():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4)) * 0.6
    B = rng.standard_normal((4, 2))
    Q, R = np.eye(4), np.eye(2) * 0.5
    P1 = solve_dare(A, B, Q, R, method="schur")
    P2 = solve_dare(A, B, Q, R, method="doubling")
    rel = float(np.abs(P1 - P2).max() / np.abs(P1).max())
    return rel < 1e-9, f"relative gap {rel:.1e}"


def check_lqr_feedback():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    Q, R = np.eye(2), np.array([0.1])
    P = solve_dare(A, B, Q, np.atleast_2d(R))
    K = np.linalg.solve(R[None] + B.T @ P @ B, B.T @ P @ A)
    problem = LinearQuadraticProblem(A, B, Q, R, P, N=20)
    x0 = np.array([0.7, -0.3])
    it = ShootingIterate(np.zeros((21, 2)), np.zeros((20, 1)))
    engine = RtiEngine()
    fb = engine.feedback(engine.prepare(it, problem), x0)
    err = float(np.abs(fb.u + K @ x0).max())
    return err < 1e-6, f"|u + Kx0| {err:.1e}"


def check_shift():
    X = np.arange(4 * 9, dtype=float).reshape(4, 9)
    U = np.arange(6, dtype=float).reshape(3, 2)
    out = shift(ShootingIterate(X, U), 0.05)
    ok = (np.array_equal(out.X[:-1], X[1:]) and np.array_equal(out.U[:-1], U[1:])
          and np.isclose(out.X[-1, vm.T], X[-1, vm.T] + 0.05))
    return bool(ok), "nodes moved one step, tail time advanced"


def check_determinism():
    from .simulator import Scenario, log_csv_text, run_closed_loop
    from .planner import PlannerConfig

    doc = {"name": "tiny", "road": {"straight": {"length": 120.0, "left": 5.5, "right": -2.0}},
           "ego": {"s": 5.0, "Vx": 8.0, "y": 0.2, "Tr": 7.68}, "obstacles": [],
           "commands": [{"t": 0.0, "mode": "DRIVE", "v_ref": 8.0, "y_ref": 0.0}],
           "duration": 0.5, "perceived_horizon": 60.0, "noise": {"y": 0.01}, "seed": 5}
    cfg = PlannerConfig(workers=1)
    a = log_csv_text(run_closed_loop(Scenario.from_dict(doc), cfg))
    b = log_csv_text(run_closed_loop(Scenario.from_dict(doc), cfg))
    return a == b, f"{len(a)} bytes compared"


def check_command_roundtrip():
    c = BehaviouralCommand(1.5, Mode.OVERTAKE, 13.0, 0.0, None)
    return BehaviouralCommand.from_dict(c.to_dict()) == c, "command survives to_dict/from_dict"


def check_limits():
    lb, ub = ActuatorLimits().control_bounds()
    return bool(np.all(lb < 0) and np.all(ub > 0)), f"rate box {lb} .. {ub}"


CHECKS = {
    "equilibrium": check_equilibrium,
    "integrator order": check_integrator_order,
    "sensitivities vs FD": check_sensitivities,
    "QP vs enumeration": check_qp_enumeration,
    "DARE schur vs doubling": check_dare_methods,
    "RTI equals LQR": check_lqr_feedback,
    "shift": check_shift,
    "command round trip": check_command_roundtrip,
    "rate limits": check_limits,
    "closed-loop determinism": check_determinism,
}


def run_checks(names=None):
    """Run the checks; exceptions count as failures."""
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
