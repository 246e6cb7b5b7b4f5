"""Forward model tying tensors to directional intensities.

A view with unit beam direction v predicts intensity v^T Q v at each voxel.
Tensors are parameterized in the log domain by the 6-vector X with
Q = exp(sym_from_vech(X)), so predictions stay positive for any finite X.
The per-observation residual is v^T exp(S) v - I and its 6-entry Jacobian
row follows from the chain rule through the matrix exponential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import symcalc
from .volume import ScalarVolume, TensorVolume, unit_direction

# Channels of X holding the diagonal of S; adding ln(s) to them scales the
# modeled tensor by s because scalar matrices commute with everything.
DIAG_CHANNELS = (0, 3, 5)

# Default floor applied to normalized intensities before fitting.
INTENSITY_FLOOR = 1e-3


@dataclass(frozen=True)
class Observation:
    """One (voxel, view) intensity sample in the normalized fitting domain."""

    voxel: int
    view: int
    direction: np.ndarray
    intensity: float

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=float)
        if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise ValueError("observation direction must be a unit 3-vector")
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError(f"observation intensity must be finite and >= 0, got {self.intensity}")
        object.__setattr__(self, "direction", v)


@dataclass(frozen=True)
class RobustLoss:
    """Loss applied to the squared data residual.

    kind "identity" keeps plain least squares; "huber" grows linearly once
    |residual| exceeds `scale`.
    """

    kind: str = "identity"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "huber"):
            raise ValueError(f"unknown robust loss kind {self.kind!r}")
        if self.kind == "huber" and not self.scale > 0:
            raise ValueError(f"huber scale must be positive, got {self.scale}")


def robust_loss(r2, loss: RobustLoss):
    """Evaluate the robust loss and its derivative with respect to r^2.

    identity: (r2, 1). huber(c): (r2, 1) inside r2 <= c^2, otherwise
    (2 c sqrt(r2) - c^2, c / sqrt(r2)). Value and slope are continuous at
    the breakpoint. Accepts scalars or arrays.
    """
    r2 = np.asarray(r2, dtype=float)
    if np.any(r2 < 0):
        raise ValueError("squared residual must be >= 0")
    if loss.kind == "identity":
        return r2 + 0.0, np.ones_like(r2)
    c = loss.scale
    r = np.sqrt(r2)
    inside = r2 <= c * c
    value = np.where(inside, r2, 2.0 * c * r - c * c)
    deriv = np.where(inside, 1.0, c / np.maximum(r, c))
    return value, deriv


def project(Q: np.ndarray, v: np.ndarray) -> float:
    """Quadratic form v^T Q v; positive whenever Q is positive-definite."""
    v = np.asarray(v, dtype=float)
    return float(v @ np.asarray(Q, dtype=float) @ v)


def residual(X: np.ndarray, obs: Observation) -> float:
    """Model-minus-data residual v^T exp(S) v - I at one observation."""
    S = symcalc.sym_from_vech(X)
    return project(symcalc.exp_sym3(S), obs.direction) - obs.intensity


def residual_jacobian(X: np.ndarray, obs: Observation) -> np.ndarray:
    """Gradient of the residual with respect to the 6 parameters of X.

    The chain rule contracts the outer product of the direction with the
    9x9 exponential Jacobian and the duplication matrix:
    (v kron v) . dexp(S) . D.
    """
    S = symcalc.sym_from_vech(X)
    vv = np.kron(obs.direction, obs.direction)
    return vv @ symcalc.dexp_sym3(S) @ symcalc.duplication()


# ---------------------------------------------------------------------------
# Batched evaluation over voxel fields (the solver hot path)


def predict_many(X_rows: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Predicted intensities for every (view, voxel) pair.

    X_rows is (m, 6); dirs is (n_views, 3) of unit directions. Returns
    (n_views, m). Uses the eigenbasis directly: v^T Q v = sum_k e^{w_k} a_k^2
    with a = V^T v, which is strictly positive by construction.
    """
    S = symcalc.sym_from_vech_many(X_rows)
    w, V = symcalc.eig_sym3_many(S)
    a = np.einsum("mki,nk->nmi", V, dirs)
    return np.einsum("nmi,mi->nm", a * a, np.exp(w))


def predict_and_rows_many(X_rows: np.ndarray, dirs: np.ndarray):
    """Predictions plus per-view Jacobian rows for every voxel.

    Returns (pred, rows) with pred of shape (n_views, m) and rows of shape
    (n_views, m, 6); rows[n, j] is the derivative of view n's prediction with
    respect to X_j.
    """
    S = symcalc.sym_from_vech_many(X_rows)
    w, V = symcalc.eig_sym3_many(S)
    a = np.einsum("mki,nk->nmi", V, dirs)
    pred = np.einsum("nmi,mi->nm", a * a, np.exp(w))

    m = X_rows.shape[0]
    K = np.einsum("mij,mkl->mikjl", V, V).reshape(m, 9, 9)
    vecL = symcalc.loewner_exp_many(w).reshape(m, 9)
    dexp = np.einsum("mpq,mq,mrq->mpr", K, vecL, K)
    vv = np.einsum("ni,nj->nij", dirs, dirs).reshape(-1, 9)
    rows9 = np.einsum("nq,mqp->nmp", vv, dexp)
    return pred, rows9 @ symcalc.duplication()


def project_volume(tensor: TensorVolume, v: np.ndarray) -> ScalarVolume:
    """Render the scalar volume seen along unit direction v.

    Every valid voxel gets v^T exp(S_j) v, which is strictly positive; the
    output reuses the tensor volume's grid and validity mask.
    """
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError("projection direction must be unit length")
    rows = flatten_voxels(tensor.params)
    pred = predict_many(rows, v[None, :])[0]
    values = unflatten_voxels(pred, tensor.dims)
    mask = None if tensor.mask is None else tensor.mask.copy()
    return ScalarVolume(values, tensor.spacing, tensor.origin, mask=mask)


# ---------------------------------------------------------------------------
# Voxel ordering and intensity normalization


def flatten_voxels(arr: np.ndarray) -> np.ndarray:
    """(nx, ny, nz, ...) -> (n_voxels, ...) rows in x-fastest voxel order."""
    order = (2, 1, 0) + tuple(range(3, arr.ndim))
    return np.ascontiguousarray(np.transpose(arr, order)).reshape((-1,) + arr.shape[3:])

def unflatten_voxels(rows: np.ndarray, dims) -> np.ndarray:
    """Inverse of flatten_voxels for the given (nx, ny, nz)."""
    nx, ny, nz = dims
    arr = rows.reshape((nz, ny, nx) + rows.shape[1:])
    return np.transpose(arr, (2, 1, 0) + tuple(range(3, arr.ndim)))


def normalize_views(values: list[np.ndarray], masks: list[np.ndarray],
                    floor: float = INTENSITY_FLOOR):
    """Map raw view intensities into the fitting range [floor, ~1].

    The peak is the maximum intensity over the valid voxels of all views
    (1.0 when there is no positive data). Returns the normalized arrays and
    the peak used, so fitted tensors can be rescaled back afterwards.
    """
    peak = 0.0
    for vals, msk in zip(values, masks):
        if np.any(msk):
            peak = max(peak, float(vals[msk].max()))
    if peak <= 0.0:
        peak = 1.0
    normalized = [np.maximum(np.maximum(v, 0.0) / peak, floor) for v in values]
    return normalized, peak


def rescale_log_params(X_rows: np.ndarray, scale: float) -> np.ndarray:
    """Multiply the modeled tensors by `scale` via a log-domain shift.

    Adding ln(scale) to the diagonal channels of X multiplies exp(S) by
    scale exactly, so normalized fits convert to raw intensity units without
    touching the eigenbasis.
    """
    out = X_rows.copy()
    out[:, DIAG_CHANNELS] += np.log(scale)
    return out
