"""Measure-level view of a finished run.

Treats the rank invariant of the Hessian as a density: integrates it
per cube through an independent quadrature path, compares against the
masses the run certified, bounds the weak-star gap between consecutive
stages for a family of test functions, and follows the density at a
point down the stages.
"""

from degenhess import StairConfig, run_construction
from degenhess.fields import Box, ScalarFieldC2, make_base
from degenhess.measures import (
    ck_mass,
    density_trace,
    mass_bound_check,
    stage_measures,
    test_function_family,
    weakstar_gap,
)

base = make_base("quadratic", {"matrix": [[0.5, 0.0], [0.0, 0.5]]}, 2)
field = ScalarFieldC2(base, Box((0.0, 0.0), (1.0, 1.0)))
cfg = StairConfig(seed=42, tau=0.9, node_budget=2_000_000)
result = run_construction(field, 2, 1.5, 0.3, 0.1, 3, config=cfg)
mcfg = StairConfig(node_budget=1_000_000)

print("total mass per stage against the uniform bound:")
for stage, total, err, bound, ok in mass_bound_check(result):
    print(f"  stage {stage}: {total:.12f} (err {err:.2e}) "
          f"<= {bound:.4f} {'PASS' if ok else 'FAIL'}")

# independent integration of the final field; under the same node
# budget the panel geometry matches the stage integrator and the two
# code paths agree to the last bit
measure = ck_mass(result.field, 2, result.stages[-1].certificate.m_j,
                  config=cfg)
certified = stage_measures(result)[-1]
print()
print(f"re-integrated total {measure.total:.12f} "
      f"vs certified {certified.total:.12f} "
      f"(difference {abs(measure.total - certified.total):.1e})")

print()
print("weak-star gaps between stage 1 and the base:")
sch = result.stages[0].schedule
f1, f0 = result.stages[0].field, result.base
for name, phi in test_function_family(2):
    gap = weakstar_gap(f1, f0, phi, result.tau, sch.K_j,
                       k=2, j=1, config=mcfg)
    print(f"  phi = {name:10s} gap {gap.gap: .5f} (quad err "
          f"{gap.quad_error:.1e}) <= bound {gap.bound:.4f}")

print()
print("density of the invariant at a fixed point, stage by stage:")
trace = density_trace((0.3, 0.6), result)
for stage, val in zip(trace.stages, trace.values):
    print(f"  stage {stage}: {val:.12f}")
print(f"  decaying flag: {trace.decaying}"
      + (f"  ({trace.note})" if trace.note else ""))
print()
print("the atoms conserve each cube's mass, so a flat trace here is")
print("the honest outcome; the contraction lives in the power integral")
