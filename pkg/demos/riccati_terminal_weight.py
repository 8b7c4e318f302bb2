"""Where the terminal weight comes from.

The planner closes its horizon with the cost-to-go of an infinite-horizon
LQR linearised at straight-line cruise. This script solves that Riccati
equation two ways, checks the scalar closed form, and shows the resulting
regulator is stable.

Run: python demos/riccati_terminal_weight.py
"""
import math

import numpy as np

from urbanmpc import vehicle as vm
from urbanmpc.ocp import (DRIVE_SPANS, cruise_state, normalize_state_weights, solve_dare,
                          spans_vector, terminal_weight)

dt, q, r = 0.05, 1.0, 1.0
root = (q * dt**2 + math.sqrt(q**2 * dt**4 + 4 * dt**2 * q * r)) / (2 * dt**2)
for method in ("schur", "doubling"):
    P = solve_dare([[1.0]], [[dt]], [[q]], [[r]], method)
    print(f"integrator x+ = x + {dt} u, {method:>8}: P = {P[0, 0]:.12f} "
          f"(closed form {root:.12f})")

params = vm.VehicleParams()
Q = normalize_state_weights(spans_vector(DRIVE_SPANS))
R = np.array([1.0, 1.0])
for v in (3.0, 8.0, 13.0, 20.0):
    P = terminal_weight(params, v, Q, R, dt)
    _, A, B = vm.sensitivities(cruise_state(params, v), np.zeros(2), dt,
                               lambda s: np.zeros_like(np.asarray(s, float)), params)
    reg = np.flatnonzero(Q > 0)
    Ar, Br, Pr = A[np.ix_(reg, reg)], B[reg], P[np.ix_(reg, reg)]
    K = np.linalg.solve(np.diag(R) + Br.T @ Pr @ Br, Br.T @ Pr @ Ar)
    rho = max(abs(np.linalg.eigvals(Ar - Br @ K)))
    print(f"cruise at {v:4.1f} m/s: trace(P) = {np.trace(P):9.2f}, "
          f"closed-loop spectral radius {rho:.4f}")
