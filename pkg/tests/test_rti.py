from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares

from urbanmpc import vehicle as vm
from urbanmpc.constraints import Obstacle, SoftPenaltyConfig
from urbanmpc.ocp import (DRIVE_SPANS, RATE_SPANS, BehaviouralCommand, HorizonConfig, build_ocp,
                          cruise_state, make_weights, solve_dare, with_terminal)
from urbanmpc.rti import LinearQuadraticProblem, RtiEngine, ShootingIterate, shift
from urbanmpc.road import RoadMap
from urbanmpc.vehicle import NX, S, T, VX, Y, ActuatorLimits, VehicleParams

PARAMS = VehicleParams()
LIMITS = ActuatorLimits()
WIDE = RoadMap.straight(500.0, 5.5, -5.5)

DT = 0.1
A_DI = np.array([[1.0, DT], [0.0, 1.0]])
B_DI = np.array([[0.5 * DT**2], [DT]])


def lq_problem(N=30, Q=np.diag([1.0, 0.5]), R=np.array([0.1])):
    P = solve_dare(A_DI, B_DI, Q, np.diag(R))
    return LinearQuadraticProblem(A_DI, B_DI, Q, R, P, N, DT), P


def zero_iterate(problem):
    return ShootingIterate.constant(np.zeros(problem.nx), problem.N, problem.nu, problem.dt,
                                    t_index=None)


# linear-quadratic stub -----------------------------------------------------------
@settings(max_examples=30)
@given(p=st.floats(-5, 5), v=st.floats(-5, 5))
def test_feedback_equals_riccati_gain(p, v):
    problem, P = lq_problem()
    R = np.diag(problem.weights.R)
    K = np.linalg.solve(R + B_DI.T @ P @ B_DI, B_DI.T @ P @ A_DI)
    x0 = np.array([p, v])
    engine = RtiEngine()
    fb = engine.feedback(engine.prepare(zero_iterate(problem), problem), x0)
    assert np.abs(fb.u - (-K @ x0)).max() <= 1e-6 * (1 + np.abs(K @ x0).max())


def test_hand_condensed_three_node_problem():
    Q, Pt, r = np.diag([2.0, 1.0]), np.diag([3.0, 4.0]), 0.5
    problem = LinearQuadraticProblem(A_DI, B_DI, Q, [r], Pt, 2, DT)
    cqp = RtiEngine().prepare(zero_iterate(problem), problem)
    # x1 = A x0 + B u0, x2 = A^2 x0 + A B u0 + B u1
    G1 = np.hstack([B_DI, np.zeros((2, 1))])
    G2 = np.hstack([A_DI @ B_DI, B_DI])
    H = G1.T @ Q @ G1 + G2.T @ Pt @ G2 + r * np.eye(2)
    g_p = G1.T @ Q @ A_DI + G2.T @ Pt @ A_DI @ A_DI
    assert np.allclose(cqp.qp.H, H, atol=1e-14)
    assert np.allclose(cqp.g_p, g_p, atol=1e-14)
    assert np.allclose(cqp.qp.g, 0.0)


def test_stationary_lq_iterate_gives_zero_step():
    problem, _ = lq_problem()
    engine = RtiEngine()
    fb = engine.feedback(engine.prepare(zero_iterate(problem), problem), np.zeros(2))
    assert np.abs(fb.solution.x).max() == 0.0 and fb.kkt == 0.0


def test_second_iteration_does_not_raise_kkt_metric():
    problem, _ = lq_problem()
    res = RtiEngine().sqp_cycle(zero_iterate(problem), problem, np.array([2.0, -1.0]), n_sqp=2)
    assert len(res.kkt) == 2
    assert res.kkt[1] <= res.kkt[0]
    assert res.kkt[1] < 1e-12


def test_sqp_cycle_needs_one_iteration():
    problem, _ = lq_problem()
    with pytest.raises(ValueError):
        RtiEngine().sqp_cycle(zero_iterate(problem), problem, np.zeros(2), n_sqp=0)


def test_dimension_mismatch_is_rejected():
    problem, _ = lq_problem(N=5)
    bad = ShootingIterate(np.zeros((5, 2)), np.zeros((5, 1)))
    with pytest.raises(ValueError):
        RtiEngine().prepare(bad, problem)


# shift -------------------------------------------------------------------------------
def test_shift_constant_trajectory():
    x0 = cruise_state(PARAMS, 10.0)
    x0[S] = 0.0
    it = ShootingIterate.constant(x0, 10, 2, 0.05)
    out = shift(it, 0.05)
    keep = [i for i in range(NX) if i != T]
    assert np.array_equal(out.X[:, keep], it.X[:, keep])
    assert np.allclose(out.X[:, T], it.X[:, T] + 0.05)


def test_shift_ramp_controls():
    it = ShootingIterate(np.zeros((5, NX)), np.arange(8.0).reshape(4, 2))
    out = shift(it, 0.05)
    assert np.array_equal(out.U, [[2, 3], [4, 5], [6, 7], [6, 7]])


def test_shift_moves_working_set_by_one_node():
    N, nu, r = 3, 2, 2
    ws = np.array([1, 0, 0, -1, 0, 1] + [1, 0, 0, 0, -1, 1])
    it = ShootingIterate(np.zeros((N + 1, NX)), np.zeros((N, nu)), working_set=ws)
    out = shift(it, 0.05, rows_per_node=r)
    assert np.array_equal(out.working_set[:6], [0, -1, 0, 1, 0, 1])
    assert np.array_equal(out.working_set[6:], [0, 0, -1, 1, 0, 0])


# vehicle OCP -------------------------------------------------------------------------
def weights(v_ref, params=PARAMS):
    return with_terminal(make_weights(DRIVE_SPANS, SoftPenaltyConfig(), 3), params, v_ref, 0.05)


def vehicle_ocp(x0, command, obstacles=(), road=WIDE, horizon=100.0, params=PARAMS):
    return build_ocp(x0, road, obstacles, command, HorizonConfig(),
                     weights(command.v_ref, params), params, LIMITS, horizon)


def cruise_iterate(x0, N=60, dt=0.05):
    it = ShootingIterate.constant(x0, N, 2, dt)
    it.X[:, S] = x0[S] + x0[VX] * dt * np.arange(N + 1)
    return it


def test_stationary_cruise_needs_no_correction():
    # without drag the cruise torque is zero, so every reference is met exactly
    params = replace(PARAMS, c_aero=0.0)
    x0 = cruise_state(params, 10.0)
    x0[S] = 5.0
    ocp = vehicle_ocp(x0, BehaviouralCommand(v_ref=10.0), params=params)
    engine = RtiEngine()
    cqp = engine.prepare(cruise_iterate(x0), ocp)
    assert np.abs(cqp.qp.g).max() < 1e-6
    fb = engine.feedback(cqp, x0)
    assert np.abs(fb.u).max() < 1e-6


def test_soft_hessian_is_negligible_far_from_everything():
    x0 = cruise_state(PARAMS, 10.0)
    x0[S] = 5.0
    ocp = vehicle_ocp(x0, BehaviouralCommand(v_ref=10.0), [Obstacle(450.0, 0.0)])
    it = cruise_iterate(x0)
    Hx, _, _ = ocp.cost_model(it.X, it.U)
    soft_part = Hx[:-1] - np.diag(ocp.weights.Q_state)
    assert np.abs(soft_part).max() < 1e-10


def _snapshot():
    x0 = cruise_state(PARAMS, 13.0)
    x0[S], x0[Y] = 5.0, 0.4
    obstacles = [Obstacle(20.0, 0.0, Vs=10.0)]
    ocp = vehicle_ocp(x0, BehaviouralCommand(v_ref=13.0, y_ref=0.0), obstacles)
    engine = RtiEngine()
    it = cruise_iterate(x0)
    for _ in range(3):
        it = engine.sqp_cycle(it, ocp, x0).iterate
    return engine, ocp, it, x0


def test_expansion_satisfies_linearised_continuity():
    engine, ocp, it, x0 = _snapshot()
    cqp = engine.prepare(it.copy(), ocp)
    p = np.zeros(NX)
    p[Y] = 0.05
    fb = engine.feedback(cqp, x0 + p)
    du = fb.solution.x.reshape(-1, 2)
    dX = cqp.expand(fb.solution.x, p)
    A, B, d = cqp.iterate.A, cqp.iterate.B, cqp.iterate.defects
    lhs = dX[1:]
    rhs = np.einsum("kij,kj->ki", A, dX[:-1]) + np.einsum("kij,kj->ki", B, du) + d
    assert np.abs(lhs - rhs).max() < 1e-10 * max(1.0, np.abs(lhs).max())
    assert np.allclose(dX[0], p)


def test_condensed_hessian_is_symmetric_psd():
    engine, ocp, it, _ = _snapshot()
    H = engine.prepare(it, ocp).qp.H
    assert np.array_equal(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0


def test_feedback_is_affine_in_initial_state():
    engine, ocp, it, x0 = _snapshot()
    cqp = engine.prepare(it, ocp)
    d = np.zeros(NX)
    d[Y], d[VX], d[vm.XI] = 1e-3, 2e-3, -5e-4
    sols = [engine.feedback(cqp, x0 + k * d) for k in range(3)]
    assert np.array_equal(sols[0].solution.working_set, sols[2].solution.working_set)
    u = [s.u for s in sols]
    second = u[2] - 2 * u[1] + u[0]
    assert np.abs(second).max() <= 1e-8 * (1 + np.abs(u[1]).max())


def test_shifted_warm_start_is_not_worse_on_a_nominal_run():
    x = cruise_state(PARAMS, 10.0)
    x[S], x[Y] = 5.0, 0.6
    command = BehaviouralCommand(v_ref=10.0)
    engine = RtiEngine()
    it = cruise_iterate(x)
    gaps = []
    for _ in range(20):
        ocp = vehicle_ocp(x, command)
        costs = []
        for warm in (shift(it, ocp.dt), it.copy()):
            warm.X[:, T] = x[T] + ocp.dt * np.arange(ocp.N + 1)
            res = engine.sqp_cycle(warm, ocp, x)
            X = _rollout(x, res.iterate.U[None], ocp)[0]
            costs.append(float(np.sum(ocp.residual_vector(X, res.iterate.U) ** 2)))
            if len(costs) == 1:
                nxt, u = res.iterate, res.u
        gaps.append(costs[0] - costs[1])
        x = vm.integrate_step(x, u, ocp.dt, ocp.curvature, PARAMS)
        it = nxt
    assert np.mean(gaps) <= 0.0


# reference nonlinear solver on a swerve ------------------------------------------------
def _rollout(x0, U_batch, ocp):
    """Simulate ``U_batch (K, N, nu)`` from ``x0``; returns ``(K, N+1, nx)``."""
    K = U_batch.shape[0]
    X = np.empty((K, ocp.N + 1, NX))
    X[:, 0] = x0
    for k in range(ocp.N):
        X[:, k + 1] = vm.integrate_step(X[:, k].T, U_batch[:, k].T, ocp.dt, ocp.curvature,
                                        PARAMS).T
    return X


def test_sqp_converges_to_reference_solution_on_a_swerve():
    x0 = cruise_state(PARAMS, 10.0)
    x0[S] = 5.0
    ocp = vehicle_ocp(x0, BehaviouralCommand(v_ref=10.0, y_ref=1.0))
    engine = RtiEngine()
    it = cruise_iterate(x0)
    for _ in range(40):
        res = engine.sqp_cycle(it, ocp, x0)
        it = res.iterate
        if res.kkt[-1] < 1e-14:
            break
    assert np.abs(it.X[-1, Y] - 1.0) < 0.2
    lb, ub = ocp.u_bounds()
    assert np.all(it.U > lb) and np.all(it.U < ub)
    scale = np.array(RATE_SPANS)

    # single shooting over scaled controls, central-difference Jacobian
    def residual(z):
        U = (z.reshape(ocp.N, 2) * scale)[None]
        return ocp.residual_vector(_rollout(x0, U, ocp)[0], U[0])

    def jacobian(z):
        h = 1e-6
        Z = z.reshape(ocp.N, 2)
        E = np.eye(z.size).reshape(z.size, ocp.N, 2) * h
        Xp = _rollout(x0, (Z + E) * scale, ocp)
        Xm = _rollout(x0, (Z - E) * scale, ocp)
        cols = [(ocp.residual_vector(Xp[i], (Z + E[i]) * scale)
                 - ocp.residual_vector(Xm[i], (Z - E[i]) * scale)) / (2 * h)
                for i in range(z.size)]
        return np.column_stack(cols)

    z0 = np.zeros(ocp.N * 2)
    ref = least_squares(residual, z0, jac=jacobian, method="lm", xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, max_nfev=200)
    z_sqp = (it.U / scale).ravel()
    assert np.abs(z_sqp - ref.x).max() < 1e-4
    X_ref = _rollout(x0, (ref.x.reshape(ocp.N, 2) * scale)[None], ocp)[0]
    assert np.abs(X_ref[:, Y] - it.X[:, Y]).max() < 1e-4
