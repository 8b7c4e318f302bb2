"""Multiple-shooting Gauss-Newton SQP with the real-time iteration split.

The engine works on any problem object exposing ``N, nx, nu, dt``,
``simulate(X, U) -> (X_next, A, B)``, ``cost_model(X, U) -> (Hx, qx, value)``
with control weights ``weights.R``, ``u_bounds()`` and
``constraint_rows(X, U) -> (J, lo, hi)`` over nodes 1..N (see
:class:`urbanmpc.ocp.OcpDefinition`). :class:`LinearQuadraticProblem` is a
minimal linear instance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .qp import OPTIMAL, ActiveSetQpSolver, DenseQp, QpSolution

T_INDEX = 8


class FeedbackError(RuntimeError):
    """The feedback QP ended without an optimal solution."""

    def __init__(self, status: str, solution: QpSolution | None = None,
                 qp: DenseQp | None = None):
        super().__init__(f"feedback QP failed with status {status}")
        self.status = status
        self.solution = solution
        self.qp = qp
        self.qp_time = 0.0
        self.partial: CycleResult | None = None  # passes completed before the failure


class PreparationError(RuntimeError):
    """Integration or sensitivity evaluation failed at some shooting node."""


@dataclass
class ShootingIterate:
    X: np.ndarray  # (N+1, nx)
    U: np.ndarray  # (N, nu)
    feasible: bool = True
    working_set: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    defects: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.U.shape[0]

    def copy(self) -> "ShootingIterate":
        ws = None if self.working_set is None else self.working_set.copy()
        return ShootingIterate(self.X.copy(), self.U.copy(), self.feasible, ws)

    @classmethod
    def constant(cls, x0, N: int, nu: int, dt: float, t_index: int | None = T_INDEX):
        """Iterate that holds ``x0`` at every node (time advanced per node)."""
        x0 = np.asarray(x0, dtype=float)
        X = np.tile(x0, (N + 1, 1))
        if t_index is not None:
            X[:, t_index] = x0[t_index] + dt * np.arange(N + 1)
        return cls(X, np.zeros((N, nu)))


@dataclass
class CondensedQp:
    """Condensed QP for ``x0 = X[0]`` plus its affine dependence on ``p = x0 - X[0]``."""

    qp: DenseQp
    G: np.ndarray        # (N+1, nx, N*nu) state response to control steps
    E: np.ndarray        # (N+1, nx, nx) state response to the initial-state step
    c: np.ndarray        # (N+1, nx) response to the shooting defects
    g_p: np.ndarray      # (N*nu, nx) gradient sensitivity to p
    row_p: np.ndarray    # (m, nx) constraint-offset sensitivity to p
    lbA0: np.ndarray
    ubA0: np.ndarray
    iterate: ShootingIterate
    value: float
    prep_time: float = 0.0

    def embed(self, p) -> DenseQp:
        p = np.asarray(p, dtype=float)
        shift = self.row_p @ p
        return DenseQp(self.qp.H, self.qp.g + self.g_p @ p, self.qp.lb, self.qp.ub,
                       self.qp.A, self.lbA0 - shift, self.ubA0 - shift, check=False)

    def expand(self, du, p):
        """State corrections ``dX (N+1, nx)`` from control corrections and ``p``."""
        return self.G @ du + self.E @ p + self.c


@dataclass
class FeedbackResult:
    u: np.ndarray
    iterate: ShootingIterate
    solution: QpSolution
    kkt: float
    qp_time: float
    qp: DenseQp | None = None


@dataclass
class CycleResult:
    u: np.ndarray
    iterate: ShootingIterate
    kkt: list = field(default_factory=list)
    prep_times: list = field(default_factory=list)
    qp_times: list = field(default_factory=list)
    n_wsr: list = field(default_factory=list)
    status: str = OPTIMAL
    qps: list = field(default_factory=list)  # embedded QP of each feedback


class RtiEngine:
    """Preparation/feedback engine; keeps one QP solver instance across cycles."""

    def __init__(self, max_wsr: int = 80, budget: float | None = None,
                 solver: ActiveSetQpSolver | None = None):
        self.solver = solver or ActiveSetQpSolver(max_wsr=max_wsr, budget=budget)

    # preparation
    def prepare(self, iterate: ShootingIterate, problem) -> CondensedQp:
        t_start = time.perf_counter()
        N, nx, nu = problem.N, problem.nx, problem.nu
        X, U = iterate.X, iterate.U
        if X.shape != (N + 1, nx) or U.shape != (N, nu):
            raise ValueError("iterate dimensions do not match the problem")
        try:
            X_next, A, B = problem.simulate(X, U)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise PreparationError(str(exc)) from exc
        if not (np.all(np.isfinite(X_next)) and np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise PreparationError("non-finite sensitivities")
        d = X_next - X[1:]
        iterate.A, iterate.B, iterate.defects = A, B, d

        nv = N * nu
        G = np.zeros((N + 1, nx, nv))
        E = np.empty((N + 1, nx, nx))
        c = np.zeros((N + 1, nx))
        E[0] = np.eye(nx)
        for k in range(N):
            G[k + 1] = A[k] @ G[k]
            G[k + 1, :, k * nu:(k + 1) * nu] += B[k]
            E[k + 1] = A[k] @ E[k]
            c[k + 1] = A[k] @ c[k] + d[k]

        Hx, qx, value = problem.cost_model(X, U)
        R = np.asarray(problem.weights.R, dtype=float)
        Rfull = np.tile(R, N)
        HG = np.matmul(Hx, G)
        G_flat = G.reshape(-1, nv)
        HG_flat = HG.reshape(-1, nv)
        H = G_flat.T @ HG_flat
        H[np.diag_indices(nv)] += Rfull
        H = 0.5 * (H + H.T)
        grad_x = np.matmul(Hx, c[:, :, None])[:, :, 0] + qx
        g = G_flat.T @ grad_x.ravel() + Rfull * U.ravel()
        g_p = HG_flat.T @ E.reshape(-1, nx)

        u_lb, u_ub = problem.u_bounds()
        lb = (u_lb - U).ravel()
        ub = (u_ub - U).ravel()

        J, lo, hi = problem.constraint_rows(X, U)  # J (N, r, nx) for nodes 1..N
        r = J.shape[1]
        Aq = np.matmul(J, G[1:]).reshape(N * r, nv)
        off = np.matmul(J, c[1:, :, None]).ravel()
        row_p = np.matmul(J, E[1:]).reshape(N * r, nx)
        lbA = lo.ravel() - off
        ubA = hi.ravel() - off
        qp = DenseQp(H, g, lb, ub, Aq, lbA, ubA, check=False)
        return CondensedQp(qp, G, E, c, g_p, row_p, lbA, ubA, iterate, value,
                           time.perf_counter() - t_start)

    # feedback
    def feedback(self, cqp: CondensedQp, x0, budget: float | None = None,
                 max_wsr: int | None = None) -> FeedbackResult:
        t_start = time.perf_counter()
        it = cqp.iterate
        p = np.asarray(x0, dtype=float) - it.X[0]
        qp = cqp.embed(p)
        init = it.working_set
        if init is not None and init.shape != (qp.n + qp.m,):
            init = None
        sol = self.solver.solve(qp, init=init, max_wsr=max_wsr, budget=budget)
        qp_time = time.perf_counter() - t_start
        if sol.status != OPTIMAL:
            err = FeedbackError(sol.status, sol, qp)
            err.qp_time = qp_time
            raise err
        du = sol.x
        dX = cqp.expand(du, p)
        nu = it.U.shape[1]
        new = ShootingIterate(it.X + dX, it.U + du.reshape(-1, nu), True,
                              sol.working_set.copy())
        kkt = kkt_metric(qp, sol)
        return FeedbackResult(new.U[0].copy(), new, sol, kkt, qp_time, qp)

    def sqp_cycle(self, iterate: ShootingIterate, problem, x0, n_sqp: int = 1,
                  budget: float | None = None, max_wsr: int | None = None) -> CycleResult:
        """``n_sqp`` prepare/feedback passes; the first feedback embeds ``x0``."""
        if n_sqp < 1:
            raise ValueError("n_sqp must be at least 1")
        result = CycleResult(np.zeros(problem.nu), iterate)
        for _ in range(n_sqp):
            cqp = self.prepare(result.iterate, problem)
            try:
                fb = self.feedback(cqp, x0, budget=budget, max_wsr=max_wsr)
            except FeedbackError as exc:
                result.prep_times.append(cqp.prep_time)
                result.qp_times.append(exc.qp_time)
                result.n_wsr.append(exc.solution.n_wsr if exc.solution is not None else 0)
                exc.partial = result
                raise
            result.u = fb.u
            result.iterate = fb.iterate
            result.kkt.append(fb.kkt)
            result.prep_times.append(cqp.prep_time)
            result.qp_times.append(fb.qp_time)
            result.n_wsr.append(fb.solution.n_wsr)
            result.qps.append(fb.qp)
        return result


def kkt_metric(qp: DenseQp, sol: QpSolution) -> float:
    """Predicted step size of the SQP subproblem: ``|g'du| + sum |y_i r_i|``.

    At a stationary point of the NLP the QP solution is zero and the metric
    vanishes; it shrinks with Gauss-Newton convergence.
    """
    rows = qp.rows()
    v = rows @ sol.x
    lo, hi = qp.lower(), qp.upper()
    y = sol.y
    slack = np.where(y > 0, v - lo, np.where(y < 0, hi - v, 0.0))
    slack = np.where(np.isfinite(slack), slack, 0.0)
    return float(abs(qp.g @ sol.x) + np.sum(np.abs(y * slack)))


def shift(iterate: ShootingIterate, dt: float, rows_per_node: int = 0,
          t_index: int | None = T_INDEX) -> ShootingIterate:
    """Move every node one step earlier and duplicate the tail.

    The working set is shifted with the same node mapping so it can seed the
    next feedback QP.
    """
    X = np.concatenate([iterate.X[1:], iterate.X[-1:]], axis=0)
    if t_index is not None:
        X[-1, t_index] = iterate.X[-1, t_index] + dt
    U = np.concatenate([iterate.U[1:], iterate.U[-1:]], axis=0)
    ws = None
    if iterate.working_set is not None:
        N, nu = iterate.U.shape
        nv = N * nu
        old = iterate.working_set
        box = old[:nv].reshape(N, nu)
        box = np.concatenate([box[1:], box[-1:]])
        rows = old[nv:]
        if rows_per_node and rows.size == N * rows_per_node:
            rows = rows.reshape(N, rows_per_node)
            rows = np.concatenate([rows[1:], np.zeros_like(rows[:1])])
            ws = np.concatenate([box.ravel(), rows.ravel()])
        elif rows.size == 0:
            ws = box.ravel().copy()
    return ShootingIterate(X, U, iterate.feasible, ws)


class LinearQuadraticProblem:
    """Unconstrained linear-quadratic OCP ``x+ = A x + B u`` for checking the engine."""

    def __init__(self, A, B, Q, R, P, N: int, dt: float = 1.0):
        self.Ad = np.atleast_2d(np.asarray(A, dtype=float))
        self.Bd = np.asarray(B, dtype=float).reshape(self.Ad.shape[0], -1)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.N = N
        self.nx, self.nu = self.Bd.shape
        self.dt = dt
        self.weights = _Weights(np.atleast_1d(np.asarray(R, dtype=float)))
        self.rows_per_node = 0

    def simulate(self, X, U):
        Xn = X[:-1] @ self.Ad.T + U @ self.Bd.T
        return (Xn, np.broadcast_to(self.Ad, (self.N,) + self.Ad.shape),
                np.broadcast_to(self.Bd, (self.N,) + self.Bd.shape))

    def cost_model(self, X, U):
        Hx = np.empty((self.N + 1, self.nx, self.nx))
        Hx[:-1] = self.Q
        Hx[-1] = self.P
        qx = np.einsum("kij,kj->ki", Hx, X)
        value = 0.5 * (np.einsum("ki,kij,kj->", X, Hx, X) + np.sum(U**2 * self.weights.R))
        return Hx, qx, float(value)

    def u_bounds(self):
        inf = np.full((self.N, self.nu), np.inf)
        return -inf, inf

    def constraint_rows(self, X, U):
        return (np.zeros((self.N, 0, self.nx)), np.zeros((self.N, 0)), np.zeros((self.N, 0)))


@dataclass(frozen=True)
class _Weights:
    R: np.ndarray
