"""Symmetric 3x3 matrix calculus.

Half-vectorization (vech), column stacking (vec), the 9x6 duplication
matrix relating them, eigendecomposition with deterministic conventions,
the matrix exponential, and its 9x9 Jacobian. The Jacobian is computed
from the eigenbasis and the matrix of first divided differences of exp
(Loewner matrix), with a Taylor fallback for near-equal eigenvalues.
An independent adjoint-operator route to the same Jacobian is provided
as a cross-check.

All vec/Kronecker conventions are column-major: vec(A X B) = (B^T kron A) vec(X).
"""

from __future__ import annotations

import numpy as np

# Absolute tolerance for accepting an input matrix as symmetric.
SYM_TOL = 1e-12

# Eigengap below which divided differences of exp switch to the Taylor branch.
EIG_GAP_TAYLOR = 1e-4

# Controls for the adjoint-operator series evaluation.
SINCH_TERM_TOL = 1e-16
SINCH_MAX_TERMS = 60
ADJOINT_NORM_LIMIT = 50.0

# Maps each of the 9 column-major vec positions to its vech channel.
# vech order: (a11, a21, a31, a22, a32, a33).
VEC_TO_VECH = np.array([0, 1, 2, 1, 3, 4, 2, 4, 5])

_DUPLICATION = np.zeros((9, 6))
_DUPLICATION[np.arange(9), VEC_TO_VECH] = 1.0
_DUPLICATION.setflags(write=False)


def duplication() -> np.ndarray:
    """Return the constant 9x6 matrix D with D @ vech(A) = vec(A)."""
    return _DUPLICATION


def _check_symmetric(A: np.ndarray, tol: float = SYM_TOL) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    skew = np.abs(A - A.T).max()
    if skew > tol:
        raise ValueError(f"matrix is not symmetric: max |A - A^T| = {skew:.3e} > {tol:.0e}")
    return A


def vech(A: np.ndarray) -> np.ndarray:
    """Half-vectorize a symmetric 3x3 matrix to (a11, a21, a31, a22, a32, a33)."""
    A = _check_symmetric(A)
    return np.array([A[0, 0], A[1, 0], A[2, 0], A[1, 1], A[2, 1], A[2, 2]])


def sym_from_vech(x: np.ndarray) -> np.ndarray:
    """Rebuild the symmetric 3x3 matrix from its 6 vech parameters.

    Equivalent to unvec(duplication() @ x) but exact by construction:
    the result satisfies A == A.T bit for bit.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (6,):
        raise ValueError(f"expected 6 parameters, got shape {x.shape}")
    a11, a21, a31, a22, a32, a33 = x
    return np.array([[a11, a21, a31], [a21, a22, a32], [a31, a32, a33]])


def sym_from_vech_many(X: np.ndarray) -> np.ndarray:
    """Batched sym_from_vech: (m, 6) parameter rows -> (m, 3, 3) matrices."""
    X = np.asarray(X, dtype=float)
    m = X.shape[0]
    S = np.empty((m, 3, 3))
    S[:, 0, 0] = X[:, 0]
    S[:, 1, 0] = S[:, 0, 1] = X[:, 1]
    S[:, 2, 0] = S[:, 0, 2] = X[:, 2]
    S[:, 1, 1] = X[:, 3]
    S[:, 2, 1] = S[:, 1, 2] = X[:, 4]
    S[:, 2, 2] = X[:, 5]
    return S


def vec(A: np.ndarray) -> np.ndarray:
    """Stack the columns of a 3x3 matrix into a 9-vector."""
    A = np.asarray(A, dtype=float)
    if A.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {A.shape}")
    return A.reshape(9, order="F").copy()


def unvec(u: np.ndarray) -> np.ndarray:
    """Inverse of vec: rebuild the 3x3 matrix from column-major stacking."""
    u = np.asarray(u, dtype=float)
    if u.shape != (9,):
        raise ValueError(f"expected a 9-vector, got shape {u.shape}")
    return u.reshape((3, 3), order="F").copy()


def eig_sym3(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric 3x3 matrix with fixed conventions.

    Returns (w, V) with eigenvalues w sorted descending and orthonormal
    eigenvectors in the columns of V. Each eigenvector is oriented so its
    largest-magnitude component is positive, which makes the decomposition
    deterministic and therefore testable.
    """
    A = _check_symmetric(A, tol=1e-10)
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    w = w[::-1].copy()
    V = V[:, ::-1].copy()
    for k in range(3):
        i = int(np.argmax(np.abs(V[:, k])))
        if V[i, k] < 0:
            V[:, k] = -V[:, k]
    return w, V


def eig_sym3_many(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched eig_sym3 over an (m, 3, 3) stack of symmetric matrices."""
    w, V = np.linalg.eigh(S)
    w = w[:, ::-1].copy()
    V = V[:, :, ::-1].copy()
    idx = np.argmax(np.abs(V), axis=1)  # (m, 3) row index of dominant component
    m = S.shape[0]
    dom = V[np.arange(m)[:, None], idx, np.arange(3)[None, :]]
    V *= np.where(dom < 0, -1.0, 1.0)[:, None, :]
    return w, V


def loewner_exp(lam: np.ndarray) -> np.ndarray:
    """Matrix of first divided differences of exp over eigenvalue pairs.

    Entry (i, j) is (exp(lam_i) - exp(lam_j)) / (lam_i - lam_j), with the
    diagonal equal to exp(lam_i). Gaps below EIG_GAP_TAYLOR use the series
    exp(lam_j) * (1 + e/2 + e^2/6 + e^3/24), e = lam_i - lam_j, which keeps
    the quotient well behaved under cancellation. The result is symmetric
    by construction and all entries are strictly positive.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (3,):
        raise ValueError(f"expected 3 eigenvalues, got shape {lam.shape}")
    e = np.exp(lam)
    L = np.diag(e)
    for i in range(3):
        for j in range(i):
            L[i, j] = L[j, i] = _divided_diff_exp(lam[i], lam[j], e[i], e[j])
    return L


def _divided_diff_exp(li: float, lj: float, ei: float, ej: float) -> float:
    eps = li - lj
    if abs(eps) > EIG_GAP_TAYLOR:
        return (ei - ej) / eps
    return ej * (1.0 + eps / 2.0 + eps * eps / 6.0 + eps * eps * eps / 24.0)


def loewner_exp_many(w: np.ndarray) -> np.ndarray:
    """Batched loewner_exp over an (m, 3) stack of eigenvalue triples."""
    e = np.exp(w)
    gap = w[:, :, None] - w[:, None, :]
    ediff = e[:, :, None] - e[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = ediff / gap
    taylor = e[:, None, :] * (1.0 + gap / 2.0 + gap**2 / 6.0 + gap**3 / 24.0)
    L = np.where(np.abs(gap) > EIG_GAP_TAYLOR, quotient, taylor)
    # Mirror the lower triangle so L is exactly symmetric, then pin the diagonal.
    iu = np.triu_indices(3, 1)
    L[:, iu[1], iu[0]] = L[:, iu[0], iu[1]]
    L[:, np.arange(3), np.arange(3)] = e
    return L


def exp_sym3(M: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric 3x3 matrix via its eigenbasis.

    The result is symmetric positive-definite for every finite input.
    """
    w, V = eig_sym3(M)
    Q = (V * np.exp(w)) @ V.T
    return 0.5 * (Q + Q.T)


def exp_sym3_many(S: np.ndarray) -> np.ndarray:
    """Batched exp_sym3 over an (m, 3, 3) stack."""
    w, V = eig_sym3_many(S)
    Q = np.einsum("mik,mk,mjk->mij", V, np.exp(w), V)
    return 0.5 * (Q + np.swapaxes(Q, 1, 2))


def dexp_sym3(M: np.ndarray) -> np.ndarray:
    """9x9 Jacobian of vec(exp(M)) with respect to vec(M), M symmetric.

    Computed as (V kron V) diag(vec L) (V kron V)^T where L is the Loewner
    matrix of exp at the eigenvalues; for symmetric M the inverse factors
    reduce to transposes. The result is a symmetric 9x9 matrix.
    """
    w, V = eig_sym3(M)
    K = np.kron(V, V)
    L = loewner_exp(w)
    return (K * vec(L)) @ K.T


def dexp_sym3_many(S: np.ndarray) -> np.ndarray:
    """Batched dexp_sym3: (m, 3, 3) -> (m, 9, 9)."""
    w, V = eig_sym3_many(S)
    m = S.shape[0]
    K = np.einsum("mij,mkl->mikjl", V, V).reshape(m, 9, 9)
    vecL = loewner_exp_many(w).reshape(m, 9)  # symmetric, so row-major == vec
    return np.einsum("mpq,mq,mrq->mpr", K, vecL, K)


def _adjoint_op(M: np.ndarray) -> np.ndarray:
    """9x9 matrix of E -> M E - E M acting on vec(E): (-M^T) kronsum M."""
    I = np.eye(3)
    return np.kron(-M.T, I) + np.kron(I, M)


def _check_adjoint_norm(M: np.ndarray) -> None:
    nrm = float(np.linalg.norm(M))
    if nrm > ADJOINT_NORM_LIMIT:
        raise ValueError(
            f"adjoint series not evaluated: ||M||_F = {nrm:.3g} exceeds {ADJOINT_NORM_LIMIT}"
        )


def _matrix_series(B: np.ndarray, coeff_step, first_term: np.ndarray):
    """Sum first_term + sum_k term_k with term_{k} = term_{k-1} @ B * coeff_step(k)."""
    total = first_term.copy()
    term = first_term.copy()
    for k in range(1, SINCH_MAX_TERMS + 1):
        term = term @ B * coeff_step(k)
        total += term
        if np.linalg.norm(term) < SINCH_TERM_TOL:
            return total
    raise ValueError(f"adjoint series did not converge within {SINCH_MAX_TERMS} terms")


def dexp_najfeld(M: np.ndarray) -> np.ndarray:
    """Jacobian of the matrix exponential via the adjoint-operator identity.

    Evaluates (exp(M/2)^T kron exp(M/2)) sinch(-ad_{M/2}) with the sinch of
    the 9x9 adjoint operator summed as a truncated series. Serves as an
    independent cross-check of dexp_sym3; the two agree to ~1e-10 relative
    for moderate ||M||.
    """
    M = _check_symmetric(M)
    _check_adjoint_norm(M)
    B = -_adjoint_op(0.5 * M)
    B2 = B @ B
    # sinch(B) = sum_k B^(2k) / (2k+1)!
    sinch = _matrix_series(B2, lambda k: 1.0 / ((2 * k) * (2 * k + 1)), np.eye(9))
    E = exp_sym3(0.5 * M)
    return np.kron(E.T, E) @ sinch


def dexp_adjoint_phi(M: np.ndarray) -> np.ndarray:
    """Second adjoint-operator route: (I kron exp(M)) (1 - exp(-ad_M)) / ad_M.

    The operator fraction is the phi_1 series sum_k (-ad_M)^k / (k+1)!.
    Cross-check companion to dexp_najfeld.
    """
    M = _check_symmetric(M)
    _check_adjoint_norm(M)
    B = -_adjoint_op(M)
    phi1 = _matrix_series(B, lambda k: 1.0 / (k + 1), np.eye(9))
    return np.kron(np.eye(3), exp_sym3(M)) @ phi1
