"""Dense convex QP solver with a warm-startable dual active-set strategy.

Problem form::

    minimize    0.5 x'Hx + g'x
    subject to  lb  <= x  <= ub
                lbA <= Ax <= ubA

Multiplier convention: ``H x + g = sum_i y_i a_i`` with ``y_i >= 0`` on an
active lower side and ``y_i <= 0`` on an active upper side; bounds come first
(index ``j`` for ``x_j``), general rows follow at ``n + i``.

Working sets are integer arrays of length ``n + m`` holding ``-1`` (lower
active), ``+1`` (upper active) or ``0``.
"""
from __future__ import annotations

import time
from dataclasses import InitVar, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

OPTIMAL = "optimal"
MAX_WSR = "max_wsr"
INFEASIBLE = "infeasible"
BUDGET_EXCEEDED = "budget_exceeded"


@dataclass
class DenseQp:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A: np.ndarray | None = None
    lbA: np.ndarray | None = None
    ubA: np.ndarray | None = None
    check: InitVar[bool] = True

    def __post_init__(self, check):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("Hessian shape does not match gradient")
        if check and not np.allclose(self.H, self.H.T, rtol=1e-10, atol=1e-12 * (1 + np.abs(self.H).max())):
            raise ValueError("Hessian must be symmetric")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.lbA = np.full(m, -np.inf) if self.lbA is None else np.asarray(self.lbA, dtype=float)
        self.ubA = np.full(m, np.inf) if self.ubA is None else np.asarray(self.ubA, dtype=float)
        if check and (np.any(self.lb > self.ub) or np.any(self.lbA > self.ubA)):
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def rows(self) -> np.ndarray:
        """All constraint normals stacked: identity rows for bounds, then ``A``."""
        return np.vstack([np.eye(self.n), self.A])

    def lower(self) -> np.ndarray:
        return np.concatenate([self.lb, self.lbA])

    def upper(self) -> np.ndarray:
        return np.concatenate([self.ub, self.ubA])

    def violation(self, x) -> float:
        ax = np.concatenate([x, self.A @ x])
        lo = np.where(np.isfinite(self.lower()), self.lower() - ax, 0.0)
        hi = np.where(np.isfinite(self.upper()), ax - self.upper(), 0.0)
        return float(max(0.0, lo.max(initial=0.0), hi.max(initial=0.0)))


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    objective: float
    status: str
    working_set: np.ndarray
    n_wsr: int
    feasible: bool
    qp: DenseQp | None = field(default=None, repr=False)
    regularized: bool = False
    history: list = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residual(qp: DenseQp, x, y) -> dict:
    """Stationarity, primal, dual and complementarity residuals scaled by problem size."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = qp.n
    scale = max(1.0, np.abs(qp.H).max(initial=0.0), np.abs(qp.g).max(initial=0.0))
    stat = qp.H @ x + qp.g - y[:n] - qp.A.T @ y[n:]
    ax = np.concatenate([x, qp.A @ x])
    lo, hi = qp.lower(), qp.upper()
    dual = np.where(np.isfinite(lo), 0.0, np.maximum(y, 0.0)) + np.where(
        np.isfinite(hi), 0.0, np.maximum(-y, 0.0))
    slack_lo = np.where(np.isfinite(lo), ax - lo, np.inf)
    slack_hi = np.where(np.isfinite(hi), hi - ax, np.inf)
    comp = np.where(y > 0, y * np.minimum(slack_lo, 1e300), 0.0) + np.where(
        y < 0, -y * np.minimum(slack_hi, 1e300), 0.0)
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)) / scale,
        "primal": qp.violation(x) / max(1.0, np.abs(ax).max(initial=0.0)),
        "dual": float(dual.max(initial=0.0)) / scale,
        "complementarity": float(np.abs(comp).max(initial=0.0)) / scale,
    }


class _Factor:
    """Cholesky factor of the free-variable Hessian block, cached per free set."""

    def __init__(self, H):
        self.H = H
        self.key = None
        self.chol = None
        self.regularized = False
        n = H.shape[0]
        self.eps = 1e-8 * max(np.trace(H) / max(n, 1), 1e-12)

    def get(self, free):
        key = free.tobytes()
        if key != self.key:
            block = self.H[np.ix_(free, free)]
            shift = 0.0
            for _ in range(8):
                try:
                    self.chol = cho_factor(block + shift * np.eye(block.shape[0]),
                                           check_finite=False)
                    break
                except LinAlgError:
                    shift = self.eps if shift == 0.0 else shift * 100.0
                    self.regularized = True
            else:
                raise LinAlgError("Hessian block could not be factorised")
            self.key = key
        return self.chol


class ActiveSetQpSolver:
    """Dual active-set QP solver with hot starts.

    A cold start begins at the unconstrained minimiser; a hot start begins at
    the minimiser over a previous working set after members with wrong-sign
    multipliers are released. The most violated constraint (lowest index on
    ties) then enters until none is violated. Infeasibility is certified by a
    violated constraint whose normal lies in the span of the working set with
    no member left to release.

    One instance is meant to serve one planner; it is single threaded and keeps
    nothing between calls except statistics.

    Parameters
    ----------
    max_wsr : int
        Cap on working-set recalculations (additions plus removals, phase 1
        included).
    budget : float or None
        Wall-clock budget in seconds, checked between working-set changes.
    """

    def __init__(self, max_wsr: int = 80, budget: float | None = None,
                 record_history: bool = False):
        self.max_wsr = max_wsr
        self.budget = budget
        self.record_history = record_history

    # public API --------------------------------------------------------------
    def solve(self, qp: DenseQp, init=None, max_wsr: int | None = None,
              budget: float | None = None) -> QpSolution:
        """Solve ``qp``; ``init`` is an optional working set or previous solution."""
        ws0 = None
        if isinstance(init, QpSolution):
            ws0 = init.working_set
        elif init is not None:
            ws0 = np.asarray(init, dtype=int)
        return self._run(qp, ws0, max_wsr, budget)

    def hotstart(self, prev: QpSolution, g=None, lb=None, ub=None, A=None, lbA=None,
                 ubA=None, H=None, qp: DenseQp | None = None, max_wsr: int | None = None,
                 budget: float | None = None) -> QpSolution:
        """Re-solve with new data starting from the working set of ``prev``."""
        if qp is None:
            base = prev.qp
            if base is None:
                raise ValueError("previous solution carries no problem data")
            changes = {k: v for k, v in dict(H=H, g=g, lb=lb, ub=ub, A=A, lbA=lbA,
                                              ubA=ubA).items() if v is not None}
            qp = replace(base, **changes)
        if qp.n != len(prev.x) or qp.n + qp.m != len(prev.working_set):
            raise ValueError("hotstart requires unchanged problem dimensions")
        return self._run(qp, prev.working_set, max_wsr, budget)

    # internals ---------------------------------------------------------------
    def _run(self, qp, ws0, max_wsr, budget):
        max_wsr = self.max_wsr if max_wsr is None else max_wsr
        budget = self.budget if budget is None else budget
        deadline = None if budget is None else time.perf_counter() + budget
        n, m = qp.n, qp.m
        lo, hi = qp.lower(), qp.upper()
        eq = (lo == hi) & np.isfinite(lo)
        rows = qp.rows()
        factor = _Factor(qp.H)
        history = [] if self.record_history else None

        ws = np.zeros(n + m, dtype=int) if ws0 is None else np.asarray(ws0, dtype=int).copy()
        ws[eq] = 1
        ws[(ws == -1) & ~np.isfinite(lo)] = 0
        ws[(ws == 1) & ~np.isfinite(hi)] = 0
        ws = _independent(rows, ws, eq, n)
        try:
            x, y = _eqp(qp, ws, factor)
        except LinAlgError:
            ws = _independent(rows, np.where(eq, 1, 0), eq, n)
            x, y = _eqp(qp, ws, factor)

        state = _DualState(qp, rows, lo, hi, eq, factor, max_wsr, deadline, history)
        status = state.restore_dual_feasibility(x, y, ws)
        if status is None:
            status = state.iterate()
        x, y, ws = state.x, state.y, state.ws
        feasible = qp.violation(x) <= 10.0 * _feas_tol(qp, x)
        return QpSolution(x, y, qp.objective(x), status, ws.copy(), state.wsr, feasible, qp,
                          factor.regularized, history or [])


class _DualState:
    """Goldfarb-Idnani style dual active-set iterations.

    Every iterate minimises the objective over its working set with
    multipliers of the correct sign; the most violated constraint is then
    brought in, dropping working-set members whose multipliers would change
    sign on the way.
    """

    def __init__(self, qp, rows, lo, hi, eq, factor, max_wsr, deadline, history):
        self.qp, self.rows, self.lo, self.hi, self.eq = qp, rows, lo, hi, eq
        self.factor = factor
        self.max_wsr = max_wsr
        self.deadline = deadline
        self.history = history
        self.wsr = 0
        norms = np.linalg.norm(rows, axis=1)
        self.norms = np.where(norms > 0, norms, 1.0)

    def _stop(self):
        if self.wsr >= self.max_wsr:
            return MAX_WSR
        if self.deadline is not None and time.perf_counter() > self.deadline:
            return BUDGET_EXCEEDED
        return None

    def _lam(self, idx):
        """Sign-normalised multipliers (non-negative when dual feasible)."""
        return -self.ws[idx] * self.y[idx]

    def restore_dual_feasibility(self, x, y, ws):
        """Drop warm-start members with wrong-sign multipliers, one at a time."""
        self.x, self.y, self.ws = x, y, ws
        while True:
            act = np.flatnonzero(self.ws)
            act = act[~self.eq[act]]
            if len(act) == 0:
                return None
            lam = self._lam(act)
            tol = 1e-10 * max(1.0, np.abs(self.y).max(initial=0.0))
            k = int(np.argmin(lam))
            if lam[k] >= -tol:
                return None
            status = self._stop()
            if status:
                return status
            self.ws[act[k]] = 0
            self.wsr += 1
            self.x, self.y = _eqp(self.qp, self.ws, self.factor)

    def iterate(self):
        qp, rows, lo, hi, eq = self.qp, self.rows, self.lo, self.hi, self.eq
        while True:
            ax = rows @ self.x
            with np.errstate(invalid="ignore"):
                viol = np.maximum(lo - ax, ax - hi) / self.norms
            viol[self.ws != 0] = -np.inf
            viol[np.isnan(viol)] = -np.inf
            p = int(np.argmax(viol))
            if viol[p] <= _feas_tol(qp, self.x):
                return OPTIMAL
            side = -1 if lo[p] - ax[p] >= ax[p] - hi[p] else 1
            status = self._add(p, side)
            if status:
                return status

    def _add(self, p, side):
        qp, eq = self.qp, self.eq
        yp = 0.0
        while True:
            status = self._stop()
            if status:
                return status
            active = np.flatnonzero(self.ws)
            coef = _dependence(self.rows, active, p)
            if coef is None:
                ws_try = self.ws.copy()
                ws_try[p] = side
                try:
                    x1, y1 = _eqp(qp, ws_try, self.factor)
                except LinAlgError:
                    coef = np.linalg.lstsq(self.rows[active].T, self.rows[p], rcond=None)[0]
            if coef is not None:
                # dependent normal: move the dual variables only
                ineq = ~eq[active]
                lam = self._lam(active)
                rate = self.ws[active] * side * coef
                cand = ineq & (rate > 1e-12 * max(1.0, np.abs(coef).max(initial=0.0)))
                if not cand.any():
                    return INFEASIBLE
                ratios = np.full(len(active), np.inf)
                ratios[cand] = np.maximum(lam[cand], 0.0) / rate[cand]
                k = int(np.argmin(ratios))
                tau = ratios[k]
                self.y[active] += side * tau * coef
                yp -= side * tau
                self.ws[active[k]] = 0
                self.y[active[k]] = 0.0
                self.wsr += 1
                continue
            y0 = self.y.copy()
            y0[p] = yp
            dx = x1 - self.x
            dy = y1 - y0
            ineq = active[~eq[active]]
            lam0 = -self.ws[ineq] * y0[ineq]
            dlam = -self.ws[ineq] * dy[ineq]
            t, block = 1.0, None
            dec = dlam < 0
            if dec.any():
                tj = np.full(len(ineq), np.inf)
                tj[dec] = np.maximum(lam0[dec], 0.0) / -dlam[dec]
                k = int(np.argmin(tj))
                if tj[k] < 1.0:
                    t, block = tj[k], ineq[k]
            self.wsr += 1
            if block is None:
                self.x, self.y, self.ws = x1, y1, ws_try
                if self.history is not None:
                    self.history.append(qp.objective(self.x))
                return None
            self.x = self.x + t * dx
            y = y0 + t * dy
            yp = y[p]
            y[p] = 0.0
            y[block] = 0.0
            self.y = y
            self.ws[block] = 0
            if self.history is not None:
                self.history.append(qp.objective(self.x))


def _dependence(rows, active, p):
    """Coefficients expressing normal ``p`` through the active normals, or ``None``."""
    a = rows[p]
    if len(active) == 0:
        return None
    M = rows[active]
    coef, *_ = np.linalg.lstsq(M.T, a, rcond=None)
    res = a - M.T @ coef
    if np.linalg.norm(res) <= 1e-9 * np.linalg.norm(a):
        return coef
    return None


def _feas_tol(qp, x):
    return 1e-9 * max(1.0, np.abs(x).max(initial=0.0))


def _independent(rows, ws, eq, n):
    """Drop working-set entries whose normals are linearly dependent on earlier ones.

    Equalities are considered first, then the remaining entries in index order
    (modified Gram-Schmidt on the normals).
    """
    active = np.flatnonzero(ws)
    if len(active) == 0:
        return ws
    order = np.concatenate([active[eq[active]], active[~eq[active]]])
    basis = np.zeros((len(order), rows.shape[1]))
    kept = []
    for i in order:
        r = rows[i].astype(float)
        norm = np.linalg.norm(r)
        if norm == 0.0:
            continue
        q = basis[:len(kept)]
        res = r - q.T @ (q @ r)
        res = res - q.T @ (q @ res)
        rn = np.linalg.norm(res)
        if rn > 1e-9 * norm:
            basis[len(kept)] = res / rn
            kept.append(i)
    out = np.zeros_like(ws)
    out[kept] = ws[kept]
    return out


def _eqp(qp, ws, factor):
    """Minimiser of the QP with the working set imposed as equalities, and multipliers."""
    n = qp.n
    fixed = ws[:n] != 0
    free = ~fixed
    xB = np.where(ws[:n] < 0, qp.lb, qp.ub)[fixed]
    act = np.flatnonzero(ws[n:])
    Aw = qp.A[act]
    bW = np.where(ws[n:][act] < 0, qp.lbA[act], qp.ubA[act])
    z = np.zeros(n)
    z[fixed] = xB
    mu = np.zeros(len(act))
    if free.any():
        chol = factor.get(free)
        rhs = -qp.g[free] - qp.H[np.ix_(free, fixed)] @ xB
        hr = cho_solve(chol, rhs, check_finite=False)
        if len(act):
            Af = Aw[:, free]
            ha = cho_solve(chol, Af.T, check_finite=False)
            S = Af @ ha
            r = bW - Aw[:, fixed] @ xB - Af @ hr
            mu = np.linalg.solve(S, r)
            z[free] = hr + ha @ mu
        else:
            z[free] = hr
    elif len(act):
        raise LinAlgError("general constraints active with every variable fixed")
    y = np.zeros(n + qp.m)
    y[n + act] = mu
    grad = qp.H @ z + qp.g - Aw.T @ mu
    y[:n][fixed] = grad[fixed]
    return z, y


# problem dump ---------------------------------------------------------------
_SECTIONS = ("H", "g", "lb", "ub", "A", "lbA", "ubA")


def dump_qp(qp: DenseQp, path) -> None:
    """Write ``qp`` as plain text: one ``[name] rows cols`` section per matrix."""
    lines = ["# dense QP dump: row-major, one matrix per section"]
    for name in _SECTIONS:
        mat = np.atleast_2d(getattr(qp, name))
        if name not in ("H", "A"):
            mat = mat.reshape(-1, 1)
        lines.append(f"[{name}] {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_qp(path) -> DenseQp:
    data = {}
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        name, r, c = head[0].strip("[]"), int(head[1]), int(head[2])
        rows = [[float(v) for v in lines[i + 1 + k].split()] for k in range(r)]
        mat = np.array(rows, dtype=float).reshape(r, c)
        data[name] = mat if name in ("H", "A") else mat[:, 0]
        i += 1 + r
    return DenseQp(**data)
