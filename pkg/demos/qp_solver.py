"""The dual active-set QP solver on its own.

Solves a small problem by hand, compares a random instance with brute-force
enumeration, then follows a parametric family of QPs to show how much a
hot start saves.

Run: python demos/qp_solver.py
"""
import numpy as np

from urbanmpc.qp import ActiveSetQpSolver, DenseQp
from urbanmpc.selftest import enumerate_qp, random_qp

solver = ActiveSetQpSolver(max_wsr=1000)

# minimise 0.5|x|^2 - x1 - x2 with x1 <= 0.5
sol = solver.solve(DenseQp(np.eye(2), [-1.0, -1.0], [-10.0, -10.0], [0.5, 2.0]))
print(f"hand example: x = {sol.x}, multipliers {sol.y}, {sol.n_wsr} working-set changes")

rng = np.random.default_rng(0)
qp = random_qp(rng, 4, 4)
x_ref, f_ref = enumerate_qp(qp)
sol = solver.solve(qp)
print(f"random 4x4 QP: solver f = {sol.objective:.10f}, enumeration f = {f_ref:.10f}")

base = random_qp(rng, 20, 40)
direction = rng.standard_normal(base.n)
prev, cold_total, hot_total = None, 0, 0
for k in range(100):
    qp = DenseQp(base.H, base.g + 0.03 * k * direction, base.lb, base.ub, base.A,
                 base.lbA, base.ubA)
    cold = solver.solve(qp)
    hot = cold if prev is None else solver.hotstart(prev, qp=qp)
    cold_total += cold.n_wsr
    hot_total += hot.n_wsr
    prev = hot
print(f"100 neighbouring QPs: {cold_total} working-set changes from cold, "
      f"{hot_total} when each solve starts from the previous working set")
