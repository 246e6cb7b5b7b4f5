"""Sparse Levenberg-Marquardt over the per-voxel 6-vector field.

compound_logeuclidean stacks directional data residuals with the TV block
and minimizes them jointly; the tensors it returns are positive-definite at
every voxel by construction. compound_baseline solves the unconstrained
per-voxel linear least-squares model on the raw tensor entries, which can
and does go indefinite, and reports where.

The LM engine is generic: it needs a residual vector, a sparse Jacobian,
and optionally a cost function and a parameter projection. Normal equations
are solved with block-Jacobi preconditioned conjugate gradients; with no TV
coupling the system is block-diagonal and the first CG step is already
exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from . import symcalc
from .model import (
    INTENSITY_FLOOR,
    RobustLoss,
    flatten_voxels,
    normalize_views,
    predict_and_rows_many,
    predict_many,
    rescale_log_params,
    robust_loss,
    unflatten_voxels,
)
from .tvreg import TVConfig, TVTerm
from .volume import ScalarVolume, TensorVolume, ViewGeometry


@dataclass(frozen=True)
class SolveConfig:
    """Controls for the compounding solve.

    lam and delta parameterize the TV block; loss applies to the squared
    data residuals. The remaining knobs fix the LM schedule so runs are
    reproducible: initial damping mu0, factor 2 up on rejection, factor 3
    down on acceptance, infinity-norm gradient stop, relative cost-decrease
    stop, and a hard clamp on the log-domain parameters.
    """

    lam: float = 0.0
    delta: float = 0.01
    loss: RobustLoss = dc_field(default_factory=RobustLoss)
    max_iterations: int = 50
    mu0: float = 1e-4
    mu_up: float = 2.0
    mu_down: float = 3.0
    gradient_tol: float = 1e-8
    cost_decrease_tol: float = 1e-10
    max_rejections: int = 20
    param_bound: float = 20.0
    intensity_floor: float = INTENSITY_FLOOR

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not (self.delta > 0 and self.mu0 > 0 and self.gradient_tol > 0
                and self.cost_decrease_tol > 0 and self.param_bound > 0
                and self.intensity_floor > 0):
            raise ValueError("solver thresholds must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def tv(self) -> TVConfig:
        return TVConfig(self.lam, self.delta)


@dataclass
class SolveReport:
    """Trace of one LM run; the cost trace is non-increasing across
    accepted steps."""

    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list
    termination: str
    wall_time_s: float
    n_underdetermined: int = 0
    underdetermined: np.ndarray | None = None

    def to_dict(self) -> dict:
        """JSON-ready summary. Wall time is deliberately left out so report
        files are byte-stable across identical runs; timing lives in the run
        manifest."""
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": list(self.cost_trace),
            "termination": self.termination,
            "n_underdetermined": self.n_underdetermined,
        }


# ---------------------------------------------------------------------------
# Linear step solve

# Inexact-step controls for the inner CG; step quality is gated by the LM
# cost-decrease check, so a loose tolerance is safe. Decoupled (lam = 0)
# systems are unaffected: their block preconditioner is the exact inverse
# and the first iteration lands on the solution.
_CG_RTOL = 1e-3
_CG_MAXITER = 400


def _pcg(A, b: np.ndarray, M, rtol: float, maxiter: int) -> np.ndarray:
    """Preconditioned conjugate gradients; deterministic, fixed-order ops.

    When A is block-diagonal and M its exact block inverse, the first
    iteration already lands on the solution.
    """
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b)
    r = b.copy()
    z = M @ r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(maxiter):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            break
        z = M @ r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


class _DampedNormalSolver:
    """Solves (JtJ + diag(damp)) h = -g for a fixed JtJ and varying damping.

    The 6-wide voxel-block structure is exploited when it applies: JtJ is
    held in BSR form, damping is added into the diagonal blocks in place,
    and block-Jacobi preconditioned CG does the solve. Small or unblocked
    systems fall back to a dense solve or scalar-Jacobi CG.
    """

    def __init__(self, JtJ: sp.csr_matrix):
        n = JtJ.shape[0]
        self.n = n
        self.blocked = n % 6 == 0 and n > 36
        if not self.blocked:
            self.dense = JtJ.toarray() if n <= 2000 else None
            self.JtJ = JtJ
            return
        # Explicit stored zeros on the diagonal guarantee every voxel block
        # row exists, so damping always has somewhere to land.
        structural = sp.csr_matrix((np.zeros(n), np.arange(n), np.arange(n + 1)),
                                   shape=(n, n))
        bsr = (JtJ + structural).tobsr(blocksize=(6, 6))
        bsr.sort_indices()
        self.bsr = bsr
        m = n // 6
        rows_of_pos = np.repeat(np.arange(m), np.diff(bsr.indptr))
        self.diag_pos = np.flatnonzero(bsr.indices == rows_of_pos)
        if len(self.diag_pos) != m:
            raise AssertionError("normal matrix lost diagonal blocks")

    def diag(self) -> np.ndarray:
        if not self.blocked:
            return self.dense.diagonal().copy() if self.dense is not None \
                else self.JtJ.diagonal()
        k6 = np.arange(6)
        return self.bsr.data[self.diag_pos][:, k6, k6].ravel()

    def solve(self, damp: np.ndarray, g: np.ndarray,
              rtol: float | None = None, maxiter: int | None = None) -> np.ndarray:
        rtol = _CG_RTOL if rtol is None else rtol
        maxiter = _CG_MAXITER if maxiter is None else maxiter
        if not self.blocked:
            if self.dense is not None:
                return np.linalg.solve(self.dense + np.diag(damp), -g)
            A = (self.JtJ + sp.diags(damp)).tocsr()
            M = sp.diags(1.0 / np.maximum(A.diagonal(), np.finfo(float).tiny))
            return _pcg(A, -g, M, rtol, maxiter)
        m = self.n // 6
        data = self.bsr.data.copy()
        k6 = np.arange(6)
        data[self.diag_pos[:, None], k6, k6] += damp.reshape(m, 6)
        A = sp.bsr_matrix((data, self.bsr.indices, self.bsr.indptr),
                          shape=(self.n, self.n))
        binv = np.linalg.inv(data[self.diag_pos])
        M = sp.bsr_matrix((binv, np.arange(m), np.arange(m + 1)),
                          shape=(self.n, self.n))
        return _pcg(A, -g, M, rtol, maxiter)


# ---------------------------------------------------------------------------
# Generic Levenberg-Marquardt


def lm_minimize(system, x0: np.ndarray, cfg: SolveConfig | None = None):
    """Classic damped least squares on a residual system.

    The system must provide residuals(x) and jacobian(x) (scipy sparse or
    dense); it may provide cost(x) when the objective is not the plain sum
    of squares, and clamp(x) to project iterates onto bound constraints.

    Each iteration solves (J^T J + mu diag(J^T J)) h = -J^T r, accepts the
    step only if the cost decreases (mu /= 3), and otherwise retries with
    mu *= 2 up to the rejection cap. Stops on the infinity norm of the
    gradient, on relative cost decrease, or at the iteration cap.
    """
    cfg = cfg or SolveConfig()
    clamp = getattr(system, "clamp", lambda v: v)
    cost_fn = getattr(system, "cost", None)
    if cost_fn is None:
        def cost_fn(v):
            r = np.asarray(system.residuals(v))
            return float(r @ r)

    t0 = time.perf_counter()
    x = clamp(np.asarray(x0, dtype=float).copy())
    cost = float(cost_fn(x))
    trace = [cost]
    mu = cfg.mu0
    iterations = 0
    termination = "max_iterations"

    for _ in range(cfg.max_iterations):
        r = np.asarray(system.residuals(x))
        J = system.jacobian(x)
        if not sp.issparse(J):
            J = sp.csr_matrix(np.atleast_2d(J))
        _check_finite(system, r, J)
        g = J.T @ r
        if np.linalg.norm(g, np.inf) <= cfg.gradient_tol:
            termination = "gradient"
            break
        step_solver = _DampedNormalSolver((J.T @ J).tocsr())
        d = step_solver.diag()
        d = np.maximum(d, 1e-12 * max(float(d.max(initial=0.0)), 1.0))

        iterations += 1
        accepted = False
        stop = None
        for _ in range(cfg.max_rejections + 1):
            h = step_solver.solve(mu * d, g)
            x_new = clamp(x + h)
            cost_new = float(cost_fn(x_new))
            if np.isfinite(cost_new) and cost_new < cost:
                relative_drop = (cost - cost_new) / max(cost, np.finfo(float).tiny)
                x = x_new
                cost = cost_new
                trace.append(cost)
                mu /= cfg.mu_down
                accepted = True
                if relative_drop <= cfg.cost_decrease_tol:
                    stop = "relative_decrease"
                break
            mu *= cfg.mu_up
        if not accepted:
            termination = "rejection_cap"
            break
        if stop:
            termination = stop
            break

    report = SolveReport(
        iterations=iterations,
        initial_cost=trace[0],
        final_cost=cost,
        cost_trace=trace,
        termination=termination,
        wall_time_s=time.perf_counter() - t0,
    )
    return x, report


def _check_finite(system, r: np.ndarray, J: sp.spmatrix) -> None:
    if not np.all(np.isfinite(r)):
        k = int(np.argwhere(~np.isfinite(r))[0][0])
        raise FloatingPointError(f"non-finite residual at row {k}{_describe(system, k)}")
    bad = ~np.isfinite(J.data) if sp.issparse(J) else ~np.isfinite(J)
    if np.any(bad):
        raise FloatingPointError("non-finite Jacobian entry")


def _describe(system, row: int) -> str:
    describe = getattr(system, "describe_row", None)
    return f" ({describe(row)})" if describe else ""


# ---------------------------------------------------------------------------
# The stacked data + TV system over a voxel field


class CompoundSystem:
    """Residual system for the directional tensor fit.

    Data block: one residual per valid (view, voxel) sample, equal to
    v^T exp(S_j) v - I, optionally reweighted by sqrt of the robust-loss
    slope. TV block: the square-root Huber embedding over forward-difference
    edges of the full grid.
    """

    def __init__(self, intensities: np.ndarray, obs_mask: np.ndarray,
                 dirs: np.ndarray, dims, cfg: SolveConfig):
        self.I = intensities  # (n_views, m), normalized
        self.mask = obs_mask
        self.dirs = dirs
        self.dims = dims
        self.cfg = cfg
        self.m = intensities.shape[1]
        self.n_params = 6 * self.m
        view_idx, vox_idx = np.nonzero(obs_mask)
        self.view_idx = view_idx
        self.vox_idx = vox_idx
        self.n_data = len(view_idx)
        if cfg.lam > 0:
            self.tv = TVTerm(dims, np.ones(dims, dtype=bool), cfg.tv())
        else:
            self.tv = None
        self._pred_key = None
        self._pred = None

    def _rows(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.m, 6)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, -self.cfg.param_bound, self.cfg.param_bound)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        """One-slot cache: LM revisits the same x for residuals, cost and
        Jacobian, so the forward pass is shared."""
        key = x.tobytes()
        if key != self._pred_key:
            self._pred = predict_many(self._rows(x), self.dirs)
            self._pred_key = key
        return self._pred

    def _data_residuals(self, x: np.ndarray) -> np.ndarray:
        return (self._predict(x) - self.I)[self.view_idx, self.vox_idx]

    def cost(self, x: np.ndarray) -> float:
        r = self._data_residuals(x)
        value, _ = robust_loss(r * r, self.cfg.loss)
        total = float(np.sum(value))
        if self.tv is not None:
            total += float(np.sum(self.tv.residuals(self._rows(x)) ** 2))
        return total

    def residuals(self, x: np.ndarray) -> np.ndarray:
        r = self._data_residuals(x)
        _, slope = robust_loss(r * r, self.cfg.loss)
        parts = [np.sqrt(slope) * r]
        if self.tv is not None:
            parts.append(self.tv.residuals(self._rows(x)))
        return np.concatenate(parts)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        X_rows = self._rows(x)
        pred, rows6 = predict_and_rows_many(X_rows, self.dirs)
        self._pred, self._pred_key = pred, x.tobytes()
        r = (pred - self.I)[self.view_idx, self.vox_idx]
        _, slope = robust_loss(r * r, self.cfg.loss)
        vals = rows6[self.view_idx, self.vox_idx] * np.sqrt(slope)[:, None]

        # Rows are already column-sorted, so the CSR is assembled directly.
        indices = (self.vox_idx[:, None] * 6 + np.arange(6)[None, :]).ravel()
        data = vals.ravel()
        indptr_data = np.arange(self.n_data + 1) * 6
        if self.tv is not None:
            tv_indices, tv_data = self.tv.jacobian_csr_parts(X_rows)
            indices = np.concatenate([indices, tv_indices])
            data = np.concatenate([data, tv_data])
            n_tv = self.tv.n_residuals
            indptr = np.concatenate([indptr_data,
                                     indptr_data[-1] + 2 * np.arange(1, n_tv + 1)])
        else:
            indptr = indptr_data
        n_rows = len(indptr) - 1
        return sp.csr_matrix((data, indices, indptr), shape=(n_rows, self.n_params))

    def describe_row(self, row: int) -> str:
        if row < self.n_data:
            return f"data: view {self.view_idx[row]}, voxel {self.vox_idx[row]}"
        k = row - self.n_data
        edge, chan = divmod(k, 6)
        return f"tv: edge {self.tv.src[edge]}->{self.tv.dst[edge]}, channel {chan}"


# ---------------------------------------------------------------------------
# Field initialization and the compounding entry points


def _stack_views(views: list[tuple[ScalarVolume, ViewGeometry]]):
    if not views:
        raise ValueError("need at least one view to compound")
    grid = views[0][0].grid
    for vol, geom in views:
        if vol.grid != grid:
            raise ValueError("all views must share the reference grid; resample first")
        if not geom.transform.is_identity(1e-9):
            raise ValueError("views carry non-identity transforms; resample into the "
                             "reference frame before compounding")
    values = np.stack([flatten_voxels(vol.values) for vol, _ in views])
    masks = np.stack([flatten_voxels(vol.valid_mask()) for vol, _ in views])
    dirs = np.stack([geom.direction for _, geom in views])
    return grid, values, masks, dirs


def _mean_log_init(values: np.ndarray, masks: np.ndarray, floor: float) -> np.ndarray:
    """Log-isotropic start matching each voxel's mean observed intensity."""
    count = masks.sum(axis=0)
    mean = np.where(count > 0,
                    (values * masks).sum(axis=0) / np.maximum(count, 1), 1.0)
    level = np.log(np.maximum(mean, floor))
    X = np.zeros((values.shape[1], 6))
    X[:, [0, 3, 5]] = level[:, None]
    return X


def initialize_field(views: list[tuple[ScalarVolume, ViewGeometry]],
                     floor: float = INTENSITY_FLOOR) -> TensorVolume:
    """Per-voxel isotropic tensor whose projection matches the mean observed
    intensity; voxels nobody observes start at X = 0 (the identity tensor)."""
    grid, values, masks, _ = _stack_views(views)
    X = _mean_log_init(values, masks, floor)
    return TensorVolume(unflatten_voxels(X, grid.dims), grid.spacing, grid.origin)


def _direction_design(dirs: np.ndarray) -> np.ndarray:
    """Rows (v kron v) D: the linear map from vech(Q) to v^T Q v per view."""
    vv = np.einsum("ni,nj->nij", dirs, dirs).reshape(-1, 9)
    return vv @ symcalc.duplication()


def _underdetermined_voxels(dirs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Voxels whose observed directions fail to span the 6 tensor dofs."""
    G = _direction_design(dirs)
    gram = np.einsum("nj,na,nb->jab", masks.astype(float), G, G)
    w = np.linalg.eigvalsh(gram)
    return w[:, 0] <= 1e-10 * np.maximum(w[:, -1], 1e-300)


def compound_logeuclidean(views: list[tuple[ScalarVolume, ViewGeometry]],
                          cfg: SolveConfig | None = None):
    """Fit the positive-definite tensor field to all views.

    Intensities are normalized into [floor, 1] for the solve and the fitted
    log-domain parameters are shifted back to raw units afterwards. Returns
    (TensorVolume, SolveReport); with lam == 0, voxels that no view observes
    are masked invalid in the output.
    """
    cfg = cfg or SolveConfig()
    grid, values, masks, dirs = _stack_views(views)
    normalized, peak = normalize_views(list(values), list(masks), cfg.intensity_floor)
    intensities = np.stack(normalized)

    x0 = _mean_log_init(intensities, masks, cfg.intensity_floor).ravel()
    system = CompoundSystem(intensities, masks, dirs, grid.dims, cfg)
    x, report = lm_minimize(system, x0, cfg)

    under = _underdetermined_voxels(dirs, masks)
    report.underdetermined = under
    report.n_underdetermined = int(under.sum())

    X_rows = rescale_log_params(x.reshape(-1, 6), peak)
    observed = masks.any(axis=0)
    if cfg.lam > 0:
        out_mask = np.ones(grid.dims, dtype=bool)
    else:
        out_mask = unflatten_voxels(observed, grid.dims)
    tensor = TensorVolume(unflatten_voxels(X_rows, grid.dims),
                          grid.spacing, grid.origin, mask=out_mask)
    return tensor, report


@dataclass
class BaselineResult:
    """Per-voxel linear least-squares fit of the raw tensor entries.

    entries holds vech(Q) per voxel (not log-domain); indefinite flags the
    voxels whose fitted tensor has a non-positive eigenvalue, the failure
    mode the positive-definite parameterization removes.
    """

    entries: np.ndarray  # (nx, ny, nz, 6)
    spacing: tuple
    origin: tuple
    mask: np.ndarray
    indefinite: np.ndarray
    min_eigenvalue: np.ndarray

    @property
    def n_indefinite(self) -> int:
        return int(np.sum(self.indefinite & self.mask))

    def project(self, v: np.ndarray) -> np.ndarray:
        """Rendered intensities v^T Q v; may be negative where the fit went
        indefinite. Returns the raw (nx, ny, nz) array, unclamped."""
        v = np.asarray(v, dtype=float)
        g = _direction_design(v[None, :])[0]
        vals = flatten_voxels(self.entries) @ g
        return unflatten_voxels(vals, self.entries.shape[:3])


def compound_baseline(views: list[tuple[ScalarVolume, ViewGeometry]],
                      jitter: float = 1e-10) -> BaselineResult:
    """Per-voxel unconstrained least squares on the 6 tensor entries.

    Each observation is linear in vech(Q); normal equations get a Tikhonov
    jitter only where the observed directions are rank-deficient. Nothing
    constrains the result to be positive-definite.
    """
    grid, values, masks, dirs = _stack_views(views)
    G = _direction_design(dirs)
    w_mask = masks.astype(float)
    A = np.einsum("nj,na,nb->jab", w_mask, G, G)
    b = np.einsum("nj,nj,na->ja", w_mask, values, G)

    ew = np.linalg.eigvalsh(A)
    deficient = ew[:, 0] <= 1e-8 * np.maximum(ew[:, -1], 1e-300)
    A = A + jitter * deficient[:, None, None] * np.eye(6)
    q = np.linalg.solve(A, b[:, :, None])[:, :, 0]

    Q = symcalc.sym_from_vech_many(q)
    eigs = np.linalg.eigvalsh(Q)
    observed = masks.any(axis=0)
    return BaselineResult(
        entries=unflatten_voxels(q, grid.dims),
        spacing=grid.spacing,
        origin=grid.origin,
        mask=unflatten_voxels(observed, grid.dims),
        indefinite=unflatten_voxels(eigs[:, 0] <= 0.0, grid.dims),
        min_eigenvalue=unflatten_voxels(eigs[:, 0], grid.dims),
    )
