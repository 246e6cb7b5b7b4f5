"""Huber-smoothed total variation on the log-domain parameter field.

The penalty is applied channelwise to the 6 parameters, over forward
differences along +x, +y, +z, with zero-flux boundaries: differences that
cross the grid edge or an invalid voxel contribute nothing. For the solver
the penalty is embedded as least-squares residuals r = sqrt(lam) * h(g)
with h chosen so that sum r^2 reproduces the Huber-TV value exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import flatten_voxels, unflatten_voxels
from .volume import TensorVolume

_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class TVConfig:
    """Regularization weight and Huber knee; the neighborhood is fixed to
    forward differences along the three grid axes."""

    lam: float
    delta: float = 0.01

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"TV weight must be >= 0, got {self.lam}")
        if not self.delta > 0:
            raise ValueError(f"Huber knee must be > 0, got {self.delta}")


def huber_tv_1d(g, delta: float):
    """Huber penalty of a gradient value: 0.5 g^2 inside |g| <= delta,
    delta (|g| - delta/2) outside. Returns (value, derivative); both are
    continuous at the knee. Accepts scalars or arrays."""
    if not delta > 0:
        raise ValueError(f"Huber knee must be > 0, got {delta}")
    g = np.asarray(g, dtype=float)
    ag = np.abs(g)
    inside = ag <= delta
    value = np.where(inside, 0.5 * g * g, delta * (ag - 0.5 * delta))
    deriv = np.where(inside, g, delta * np.sign(g))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def sqrt_huber(g, delta: float):
    """Square-root embedding h with h(g)^2 equal to the Huber penalty.

    h = |g|/sqrt(2) in the quadratic zone and sqrt(delta (|g| - delta/2))
    in the linear zone; value and slope are continuous at the knee. Returns
    (h, dh/dg) with the sign convention h'(0) = 1/sqrt(2) so the
    least-squares curvature never vanishes on flat regions.
    """
    g = np.asarray(g, dtype=float)
    ag = np.abs(g)
    s = np.where(g >= 0, 1.0, -1.0)
    inside = ag <= delta
    tail = np.sqrt(delta * np.maximum(ag - 0.5 * delta, 0.5 * delta))
    h = np.where(inside, ag / _SQRT2, tail)
    hp = np.where(inside, s / _SQRT2, s * delta / (2.0 * tail))
    return h, hp


def _forward_edges(dims, valid: np.ndarray):
    """Flat (src, dst) voxel index pairs for +x, +y, +z forward differences
    between jointly-valid voxels, in x/y/z axis order."""
    flat = unflatten_voxels(np.arange(int(np.prod(dims))), dims)
    src_list, dst_list = [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        pair_ok = valid[tuple(lo)] & valid[tuple(hi)]
        src_list.append(flat[tuple(lo)][pair_ok])
        dst_list.append(flat[tuple(hi)][pair_ok])
    return np.concatenate(src_list), np.concatenate(dst_list)


class TVTerm:
    """Precomputed edge structure for evaluating the TV residual block.

    Residuals are ordered edge-major with the 6 channels fastest; each
    residual couples exactly the two voxel blocks of its edge.
    """

    def __init__(self, dims, valid: np.ndarray, cfg: TVConfig):
        self.cfg = cfg
        self.n_voxels = int(np.prod(dims))
        self.src, self.dst = _forward_edges(dims, valid)

    @property
    def n_residuals(self) -> int:
        return 6 * len(self.src)

    def _gradients(self, X_rows: np.ndarray) -> np.ndarray:
        return X_rows[self.dst] - X_rows[self.src]

    def energy(self, X_rows: np.ndarray) -> float:
        if len(self.src) == 0:
            return 0.0
        value, _ = huber_tv_1d(self._gradients(X_rows), self.cfg.delta)
        return self.cfg.lam * float(np.sum(value))

    def residuals(self, X_rows: np.ndarray) -> np.ndarray:
        h, _ = sqrt_huber(self._gradients(X_rows), self.cfg.delta)
        return (np.sqrt(self.cfg.lam) * h).ravel()

    def jacobian_triplets(self, X_rows: np.ndarray, row_offset: int):
        """(rows, cols, vals) of the sparse Jacobian block, rows starting
        at row_offset in the stacked system."""
        indices, data = self.jacobian_csr_parts(X_rows)
        n = 6 * len(self.src)
        rows = np.repeat(row_offset + np.arange(n), 2)
        return rows, indices, data

    def jacobian_csr_parts(self, X_rows: np.ndarray):
        """Column indices and values of the two entries of each TV residual
        row, already sorted within rows (src column < dst column)."""
        _, hp = sqrt_huber(self._gradients(X_rows), self.cfg.delta)
        vals = np.sqrt(self.cfg.lam) * hp  # (E, 6)
        n_edge = len(self.src)
        chan = np.tile(np.arange(6), n_edge)
        cols_src = np.repeat(self.src * 6, 6) + chan
        cols_dst = np.repeat(self.dst * 6, 6) + chan
        indices = np.stack([cols_src, cols_dst], axis=1).ravel()
        data = np.stack([-vals.ravel(), vals.ravel()], axis=1).ravel()
        return indices, data


def tv_energy(field: TensorVolume, cfg: TVConfig) -> float:
    """Huber-TV of the parameter field, scaled by the weight lam."""
    term = TVTerm(field.dims, field.valid_mask(), cfg)
    return term.energy(flatten_voxels(field.params))


def tv_residuals(field: TensorVolume, cfg: TVConfig):
    """Least-squares embedding of the TV penalty.

    Returns (r, J) where r stacks one residual per (edge, channel) with
    sum(r^2) == tv_energy, and J is the sparse Jacobian of r with respect
    to the flattened parameter vector. Empty when lam == 0.
    """
    term = TVTerm(field.dims, field.valid_mask(), cfg)
    X_rows = flatten_voxels(field.params)
    n_params = 6 * term.n_voxels
    if cfg.lam == 0 or term.n_residuals == 0:
        return np.zeros(0), sp.csr_matrix((0, n_params))
    r = term.residuals(X_rows)
    rows, cols, vals = term.jacobian_triplets(X_rows, 0)
    J = sp.csr_matrix((vals, (rows, cols)), shape=(term.n_residuals, n_params))
    return r, J
