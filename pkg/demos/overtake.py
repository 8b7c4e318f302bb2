"""Overtaking a slower car.

The ego drives at 13 m/s in OVERTAKE mode behind a car doing 10 m/s, 25 m
ahead. The planner swings out, passes, and the DRIVE command at t = 9 s
brings it back to the lane centre. The plant is heavier and draggier than
the planner's model, so feedback has to absorb the mismatch.

Run: python demos/overtake.py
"""
import json
from importlib import resources

from urbanmpc.planner import PlannerConfig
from urbanmpc.simulator import Scenario, constraint_audit, run_closed_loop
from urbanmpc.vehicle import S, VX, Y

doc = json.loads(resources.files("urbanmpc").joinpath("data", "overtake.json").read_text())
log = run_closed_loop(Scenario.from_dict(doc), PlannerConfig())
rows, lead = log.rows, log.obstacle_truth[:, 0, 0]
print(f"{'t':>5} {'ego s':>7} {'lead s':>7} {'y':>6} {'Vx':>6}")
for k in range(0, len(rows), 1000):
    print(f"{rows[k, 0]:5.1f} {rows[k, 1 + S]:7.1f} {lead[k]:7.1f} "
          f"{rows[k, 1 + Y]:6.2f} {rows[k, 1 + VX]:6.2f}")
audit = constraint_audit(log)
print(f"largest lateral offset {rows[:, 1 + Y].max():.2f} m, "
      f"lowest speed {rows[:, 1 + VX].min():.2f} m/s")
print(f"closest approach {audit['min_clearance']:.3f} m beyond the safety circles")
