"""Implicit midpoint on a swerve: halve the step, watch the error drop fourfold.

Run: python demos/integrator_order.py
"""
import numpy as np

from urbanmpc import vehicle as vm
from urbanmpc.ocp import cruise_state

params = vm.VehicleParams()


def straight(s):
    return np.zeros_like(np.asarray(s, dtype=float))


def swerve(h, duration=1.2):
    x = cruise_state(params, 10.0)
    for k in range(round(duration / h)):
        steer = 0.3 if (k * h < 0.3 - 1e-12 or k * h >= 0.9 - 1e-12) else -0.3
        x = vm.integrate_step(x, np.array([steer, 40.0]), h, straight, params)
    return x


reference = swerve(0.1 / 128)
print("A 10 m/s car steers left, right, then left again while holding torque.")
print(f"{'step [s]':>10} {'error':>12} {'observed order':>16}")
previous = None
for k in range(5):
    h = 0.1 / 2**k
    err = np.linalg.norm(swerve(h) - reference)
    order = "" if previous is None else f"{np.log2(previous / err):.3f}"
    print(f"{h:>10.5f} {err:>12.3e} {order:>16}")
    previous = err
print("A second-order method shows an observed order close to 2.")
