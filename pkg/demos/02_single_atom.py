"""Tune one oscillatory atom against a frozen matrix on the unit square.

The atom is a shaved one-directional ripple whose second derivatives
push the frozen Hessian toward rank degeneracy. Tuning bisects the
shave parameter until the measured contraction of the integral
invariant sits just under the target, then certifies support, C1 size,
the pointwise cap, compatibility, contraction and mass drift.
"""

import numpy as np

from degenhess import tune_atom
from degenhess.fields import Box
from degenhess.staircase import default_tau

A = np.array([[1.0, 0.2], [0.2, 1.0]])
k, p, eps0 = 2, 1.5, 0.1
target = default_tau(k, p)

print(f"frozen matrix:\n{A}")
print(f"k = {k}, p = {p}, amplitude allowance eps0 = {eps0}")
print(f"contraction target tau = {target:.4f}")
print()

outcome = tune_atom(A, Box((0.0, 0.0), (1.0, 1.0)), eps0, k, p, target)
cert = outcome.certificate

print(f"tuning steps: {len(outcome.history)}, "
      f"monotone: {outcome.tau_monotone}")
for periods, tau, err in outcome.history:
    print(f"  periods {periods:4d} -> measured contraction "
          f"{tau:.6f} +- {err:.1e}")
print()
print(f"periods = {cert.periods}, oscillation axis = {cert.axis_index}")
print(f"amplitude = {cert.amplitude:.6g} (sup |atom| = {cert.sup_value:.6g})")
print(f"measured contraction = {cert.tau_meas:.6f} "
      f"+- {cert.tau_err:.1e} (target {target:.4f})")
print(f"mass drift mean = {cert.drift_mean:.3e} "
      f"(quadrature error {cert.drift_err:.3e})")
print()
checks = [
    ("support", cert.pass_support),
    ("C1 size", cert.pass_c1),
    ("pointwise cap", cert.pass_hessian_cap),
    ("compatibility", cert.pass_compat),
    ("contraction", cert.pass_contraction),
    ("mass drift", cert.pass_drift),
]
for name, ok in checks:
    print(f"  {name:14s} {'PASS' if ok else 'FAIL'}")
print()
print(f"atom certificate: {'PASS' if cert.passed else 'FAIL'}")
