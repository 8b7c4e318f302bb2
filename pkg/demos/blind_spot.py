"""A car pulls out of a blind spot.

The ego cruises at 8 m/s. A car 20 m ahead of the ego's start position
crosses in from the right at 3 m/s and is only seen at t = 1.2 s, just as it
turns into the ego lane. The long-horizon planner cannot repair its plan
within its working-set budget, so a shorter planner's solution is applied
that cycle and the horizons are rebuilt afterwards.

Run: python demos/blind_spot.py
"""
import json
from importlib import resources

from urbanmpc.planner import PlannerConfig
from urbanmpc.simulator import Scenario, constraint_audit, run_closed_loop

doc = json.loads(resources.files("urbanmpc").joinpath("data", "blind_spot.json").read_text())
log = run_closed_loop(Scenario.from_dict(doc), PlannerConfig())
print(f"{'t':>5} {'applied':>8} {'status':>9}   per planner: horizon / status / working-set changes")
for c in log.cycles[20:34]:
    detail = "  ".join(f"{d.id} {d.horizon:5.1f}/{d.status}/{sum(d.n_wsr)}"
                       for d in sorted(c.subs, key=lambda d: d.id))
    print(f"{c.t:5.2f} {c.selected or '-':>8} {c.status:>9}   {detail}")
audit = constraint_audit(log)
print(f"peak deceleration {audit['peak_deceleration']:.2f} m/s^2 "
      f"(friction ellipse allows {audit['ellipse_decel_limit']:.2f})")
print(f"closest approach {audit['min_clearance']:.3f} m, events: {log.events or 'none'}")
