"""The first-order variant: degenerate Jacobians instead of Hessians.

The same staircase runs on a C1 vector field, freezing the Jacobian
per cube and planting divergence-compatible vector atoms. Here the
base map is the identity, whose Jacobian is as nondegenerate as it
gets, and the measured invariant still contracts.
"""

import numpy as np

from degenhess import StairConfig, run_first_order
from degenhess.fields import Box
from degenhess.staircase import LinearMapBase, VectorFieldC1

field = VectorFieldC1(LinearMapBase(np.eye(2)), Box((0.0, 0.0), (1.0, 1.0)))
cfg = StairConfig(seed=3, tau=0.9, node_budget=2_000_000)
result = run_first_order(field, 2, 1.1, 0.3, 0.1, 2, config=cfg)

print("identity map, k = 2, p = 1.1")
print()
print("invariant trace:")
for j, val in enumerate(result.I_trace):
    note = ""
    if j >= 1 and result.stages[j - 1].certificate.stalled:
        note = "  (stalled)"
    print(f"  I_{j} = {val:.12f}{note}")

print()
final = result.stages[-1].field
pts = np.array([[0.25, 0.25], [0.5, 0.75], [0.9, 0.1]])
vals, jac = final.evaluate_many(pts)
print("displacement from the identity at sample points:")
for x, d in zip(pts, vals - pts):
    print(f"  x = ({x[0]:.2f}, {x[1]:.2f}): |u(x) - x| = "
          f"{np.linalg.norm(d):.6f}")
print()
print(f"closeness to the base map: {result.c1a_distance:.6f} "
      f"(allowance {result.eps})")
print(f"certificates clean: "
      f"{all(s.certificate.passed for s in result.stages)}")
