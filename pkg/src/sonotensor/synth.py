"""Synthetic ground truth: piecewise-constant tensor phantoms and rendered
directional views with reproducible noise.

Phantoms are built from nested box/ellipsoid regions, each carrying an SPD
tensor given by eigenvalues plus a rotation. Views are rendered by the same
forward model the solver fits, with optional additive Gaussian noise drawn
from a counter-based generator keyed on (seed, view index) so parallel and
serial rendering agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import symcalc
from .model import flatten_voxels, predict_many, unflatten_voxels
from .volume import ScalarVolume, TensorVolume, ViewGeometry, resample


def rotation_from_euler_deg(angles) -> np.ndarray:
    """Rotation matrix Rz(c) Ry(b) Rx(a) from degrees (a, b, c)."""
    a, b, c = np.deg2rad(np.asarray(angles, dtype=float))
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class RegionTensor:
    """SPD tensor as eigenvalues plus an eigenbasis rotation."""

    eigenvalues: tuple[float, float, float]
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        ev = tuple(float(v) for v in self.eigenvalues)
        if len(ev) != 3 or any(not (v > 0) for v in ev):
            raise ValueError(f"region tensor must be positive-definite, got eigenvalues {ev}")
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "rotation_deg", tuple(float(v) for v in self.rotation_deg))

    def log_params(self) -> np.ndarray:
        """vech of log(Q) = R diag(ln eigenvalues) R^T."""
        R = rotation_from_euler_deg(self.rotation_deg)
        S = (R * np.log(self.eigenvalues)) @ R.T
        return symcalc.vech(0.5 * (S + S.T))

    @classmethod
    def from_dict(cls, d: dict) -> "RegionTensor":
        return cls(tuple(d["eigenvalues"]), tuple(d.get("rotation_deg", (0.0, 0.0, 0.0))))


@dataclass(frozen=True)
class Region:
    """One phantom region: a box ([min, max) voxel bounds) or an ellipsoid
    (center and radii in voxel units), painted over what came before."""

    shape: str
    tensor: RegionTensor
    min_voxel: tuple = ()
    max_voxel: tuple = ()
    center: tuple = ()
    radii: tuple = ()

    def __post_init__(self):
        if self.shape not in ("box", "ellipsoid"):
            raise ValueError(f"unknown region shape {self.shape!r}")
        if self.shape == "box" and (len(self.min_voxel) != 3 or len(self.max_voxel) != 3):
            raise ValueError("box region needs 3-element min_voxel and max_voxel")
        if self.shape == "ellipsoid" and (len(self.center) != 3 or len(self.radii) != 3):
            raise ValueError("ellipsoid region needs 3-element center and radii")

    def contains(self, idx: np.ndarray) -> np.ndarray:
        """Boolean membership for an (..., 3) array of voxel indices."""
        if self.shape == "box":
            lo = np.asarray(self.min_voxel, dtype=float)
            hi = np.asarray(self.max_voxel, dtype=float)
            return np.all((idx >= lo) & (idx < hi), axis=-1)
        c = np.asarray(self.center, dtype=float)
        r = np.asarray(self.radii, dtype=float)
        return np.sum(((idx - c) / r) ** 2, axis=-1) <= 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(
            shape=d["shape"],
            tensor=RegionTensor.from_dict(d["tensor"]),
            min_voxel=tuple(d.get("min_voxel", ())),
            max_voxel=tuple(d.get("max_voxel", ())),
            center=tuple(d.get("center", ())),
            radii=tuple(d.get("radii", ())),
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic phantom description; the JSON schema mirrors the fields."""

    dims: tuple[int, int, int]
    background: RegionTensor = RegionTensor((1.0, 1.0, 1.0))
    regions: tuple[Region, ...] = ()
    noise_sigma: float = 0.0
    seed: int | None = None
    n_views: int = 7
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.noise_sigma > 0 and self.seed is None:
            raise ValueError("a seed is mandatory when noise sigma > 0")
        if self.seed is not None and not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.n_views < 1:
            raise ValueError("need at least one view")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(
            dims=tuple(d["dims"]),
            background=RegionTensor.from_dict(d.get("background", {"eigenvalues": [1, 1, 1]})),
            regions=tuple(Region.from_dict(r) for r in d.get("regions", ())),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            seed=d.get("seed"),
            n_views=int(d.get("n_views", 7)),
            spacing=tuple(d.get("spacing", (1.0, 1.0, 1.0))),
            origin=tuple(d.get("origin", (0.0, 0.0, 0.0))),
        )

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def make_phantom(spec: PhantomSpec) -> TensorVolume:
    """Paint the piecewise-constant log-domain field, background first."""
    nx, ny, nz = spec.dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).astype(float)
    X = np.empty((nx, ny, nz, 6))
    X[...] = spec.background.log_params()
    for region in spec.regions:
        inside = region.contains(idx)
        X[inside] = region.tensor.log_params()
    return TensorVolume(X, spec.spacing, spec.origin)


def _noise_for_view(shape, sigma: float, seed: int, view: int) -> np.ndarray:
    key = np.array([seed, view], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.normal(0.0, sigma, size=shape)


def render_views(truth: TensorVolume, directions: np.ndarray, sigma: float = 0.0,
                 seed: int | None = None,
                 transforms: list | None = None) -> list[tuple[ScalarVolume, ViewGeometry]]:
    """Render one scalar volume per direction from the ground-truth field.

    Intensities are v^T exp(S_j) v plus Gaussian noise of the given sigma,
    clamped to >= 0. By default the views come pre-aligned (identity
    transforms); passing rigid `transforms` (acquisition frame -> reference
    frame, one per view) instead samples each view in its own frame, which
    exercises the resampling path end to end when compounding.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if np.abs(np.linalg.norm(directions, axis=1) - 1.0).max() > 1e-12:
        raise ValueError("all directions must be unit length")
    if sigma > 0 and seed is None:
        raise ValueError("a seed is mandatory when noise sigma > 0")
    if transforms is not None and len(transforms) != len(directions):
        raise ValueError("need one transform per direction")
    rows = flatten_voxels(truth.params)
    pred = predict_many(rows, directions)
    views = []
    for k in range(len(directions)):
        vals = unflatten_voxels(pred[k], truth.dims)
        if sigma > 0:
            vals = vals + _noise_for_view(vals.shape, sigma, int(seed), k)
        vals = np.maximum(vals, 0.0)
        vol = ScalarVolume(vals, truth.spacing, truth.origin,
                           mask=None if truth.mask is None else truth.mask.copy())
        T = transforms[k] if transforms is not None else None
        if T is not None and not T.is_identity(0.0):
            vol = resample(vol, T.inverse(), vol.grid)
            views.append((vol, ViewGeometry(directions[k], T, source_id=f"view_{k:03d}")))
        else:
            views.append((vol, ViewGeometry(directions[k], source_id=f"view_{k:03d}")))
    return views


# ---------------------------------------------------------------------------
# Direction sets


def _fan_extras(k: int) -> np.ndarray:
    """Golden-angle azimuth spiral around +z with the polar tilt cycling
    through 18..58 degrees, mimicking a probe swept while tilting."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    out = np.empty((k, 3))
    for j in range(k):
        theta = np.deg2rad(18.0 + 10.0 * (j % 5))
        az = golden * j
        out[j] = (np.sin(theta) * np.cos(az), np.sin(theta) * np.sin(az), np.cos(theta))
    return out


def spanning_directions(n: int = 6) -> np.ndarray:
    """n unit directions whose outer products span the 6 tensor dofs.

    The first six are the +z axis, +-45 degree tilts toward x and y, and the
    body diagonal; extras fan out around +z. The 6x6 Gram matrix of the
    induced design rows is kept at condition number < 100 (asserted).
    """
    if n < 6:
        raise ValueError("at least 6 directions are needed to span a symmetric 3x3 tensor")
    base = np.array([
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 1.0],
        [-1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
    ])
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    dirs = np.vstack([base, _fan_extras(n - 6)]) if n > 6 else base
    cond = direction_condition(dirs)
    if not cond < 100:
        raise AssertionError(f"direction set conditioning degenerated: {cond:.1f}")
    return dirs


def direction_condition(dirs: np.ndarray) -> float:
    """Condition number of the 6x6 Gram matrix of the design rows (v kron v) D."""
    vv = np.einsum("ni,nj->nij", dirs, dirs).reshape(-1, 9)
    G = vv @ symcalc.duplication()
    w = np.linalg.eigvalsh(G.T @ G)
    if w[0] <= 0:
        return np.inf
    return float(w[-1] / w[0])
