"""Walk through the singular-value invariants on a few matrices.

C_k is the k-th elementary symmetric function of the singular values;
it vanishes exactly when the rank drops below k, it is orthogonally
invariant on both sides, and for symmetric input it dominates the
signed eigenvalue version L_k in absolute value.
"""

import numpy as np

from degenhess import ck, ck_lipschitz_bound, lk, op_norm, polar_decompose

rng = np.random.default_rng(0)

print("rank-deficient examples")
for A, label in [
    (np.array([[0.0, 1.0], [0.0, 0.0]]), "nilpotent 2x2"),
    (np.diag([3.0, 2.0, 0.0]), "rank-2 diagonal 3x3"),
    (np.outer([1.0, 2.0, 1.0], [0.5, 1.0, 0.0]), "rank-1 outer 3x3"),
]:
    n = A.shape[0]
    vals = ", ".join(f"C_{k} = {float(ck(A, k)): 9.4g}"
                     for k in range(2, n + 1))
    print(f"  {label:24s} {vals}")

print()
print("orthogonal invariance (sampled)")
A = rng.standard_normal((3, 3))
O, _ = polar_decompose(rng.standard_normal((3, 3)))
drift = abs(float(ck(O @ A, 2)) - float(ck(A, 2)))
print(f"  |C_2(OA) - C_2(A)| = {drift:.3e}")

print()
print("symmetric comparison |L_k| <= C_k")
S = rng.standard_normal((3, 3))
S = 0.5 * (S + S.T)
for k in (2, 3):
    print(f"  k={k}: L_{k} = {float(lk(S, k)): .6f}, "
          f"C_{k} = {float(ck(S, k)): .6f}")

print()
print("Lipschitz control of C_2 along a matrix segment")
B = S + 0.05 * rng.standard_normal((3, 3))
lhs, rhs = ck_lipschitz_bound(S, B, 2)
print(f"  |C_2(B) - C_2(S)| = {float(lhs):.4e} <= {float(rhs):.4e}")
print()
print(f"operator norm of S: {float(op_norm(S)):.6f}")
