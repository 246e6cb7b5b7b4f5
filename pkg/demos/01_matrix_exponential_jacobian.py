"""Symmetric 3x3 calculus tour: half-vectorization, the duplication matrix,
the matrix exponential, and its 9x9 Jacobian computed three ways.

Run:  python demos/01_matrix_exponential_jacobian.py
"""

import numpy as np

from sonotensor import (
    dexp_najfeld,
    dexp_sym3,
    duplication,
    exp_sym3,
    loewner_exp,
    eig_sym3,
    sym_from_vech,
    unvec,
    vec,
    vech,
)
from sonotensor.symcalc import dexp_adjoint_phi

rng = np.random.default_rng(7)

print("=== vech / vec / duplication ===")
A = sym_from_vech([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
print("A =\n", A)
print("vech(A) =", vech(A))
print("vec(A)  =", vec(A))
D = duplication()
print("D @ vech(A) == vec(A):", np.array_equal(D @ vech(A), vec(A)))
print("unvec recovers A bit-exactly:", np.array_equal(unvec(vec(A)), A))

print("\n=== matrix exponential stays positive-definite ===")
M = sym_from_vech(rng.normal(0, 1.5, size=6))
Q = exp_sym3(M)
w, _ = eig_sym3(Q)
print("random symmetric M, eigenvalues of exp(M):", np.round(w, 4), "(all > 0)")

print("\n=== the 9x9 Jacobian of vec(exp(M)), three routes ===")
J_loewner = dexp_sym3(M)
J_sinch = dexp_najfeld(M)
J_phi = dexp_adjoint_phi(M)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(a)


print("eigenbasis + divided differences vs adjoint sinch series:",
      f"{rel(J_loewner, J_sinch):.2e}")
print("eigenbasis + divided differences vs adjoint phi series:  ",
      f"{rel(J_loewner, J_phi):.2e}")

step = 1e-5
FD = np.zeros((9, 6))
for c in range(6):
    e = np.zeros(6)
    e[c] = step
    B = sym_from_vech(e)
    FD[:, c] = vec((exp_sym3(M + B) - exp_sym3(M - B)) / (2 * step))
print("vs finite differences along the 6 symmetric directions:  ",
      f"{rel(J_loewner @ D, FD):.2e} (FD step {step:g})")

print("\n=== divided differences near equal eigenvalues ===")
for gap in (1.0, 1e-3, 1e-9, 0.0):
    lam = np.array([0.5, 0.5 + gap, -1.0])
    L = loewner_exp(lam)
    print(f"eigengap {gap:g}: L[0,1] = {L[0, 1]:.12f} (smooth through the "
          "Taylor switchover)")
