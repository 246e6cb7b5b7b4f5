"""Volume containers, rigid transforms, transform chaining, resampling, and I/O.

Scalar volumes hold one intensity per voxel; tensor volumes hold the six
log-domain parameters of a symmetric 3x3 matrix per voxel. Grids are
axis-aligned: voxel (ix, iy, iz) sits at origin + index * spacing, and
buffers are laid out x-fastest.

The .cvol file format is a UTF-8 JSON header terminated by a newline and a
NUL byte, followed by a raw little-endian float32 buffer (channel-interleaved,
x-fastest) and, if a mask is present, one 0/1 byte per voxel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-10
DIRECTION_TOL = 1e-12

# Continuous voxel coordinates this close to an integer are snapped onto it,
# which makes resampling on coincident grids reproduce stored values exactly.
GRID_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned sampling grid: voxel counts, spacing (mm), origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) <= 0 for n in self.dims):
            raise ValueError(f"grid dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValueError(f"grid spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).astype(float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    __hash__ = None


def _validated_mask(mask, dims) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != dims:
        raise ValueError(f"mask shape {mask.shape} does not match volume dims {dims}")
    return mask


@dataclass
class ScalarVolume:
    """3D grid of non-negative intensities with spacing/origin metadata.

    Intensities are clamped to >= 0 on construction; non-finite values are
    rejected. An optional boolean mask marks which voxels carry valid data.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError(f"scalar volume must be 3D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise ValueError(f"non-finite intensity at voxel {tuple(bad)}")
        self.values = np.maximum(self.values, 0.0)
        self.grid = GridSpec(self.values.shape, self.spacing, self.origin)
        self.spacing = self.grid.spacing
        self.origin = self.grid.origin
        self.mask = _validated_mask(self.mask, self.values.shape)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    def valid_mask(self) -> np.ndarray:
        """Boolean validity per voxel; all-true when no mask is stored."""
        if self.mask is None:
            return np.ones(self.dims, dtype=bool)
        return self.mask


@dataclass
class TensorVolume:
    """3D grid of 6-vector log-domain tensor parameters.

    Channel c of voxel j holds entry c of vech(S_j); the modeled tensor is
    exp(S_j), positive-definite by construction for any finite parameters.
    """

    params: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.ndim != 4 or self.params.shape[3] != 6:
            raise ValueError(f"tensor volume must have shape (nx, ny, nz, 6), got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            bad = np.argwhere(~np.isfinite(self.params))[0]
            raise ValueError(f"non-finite tensor parameter at voxel {tuple(bad[:3])} channel {bad[3]}")
        self.grid = GridSpec(self.params.shape[:3], self.spacing, self.origin)
        self.spacing = self.grid.spacing
        self.origin = self.grid.origin
        self.mask = _validated_mask(self.mask, self.params.shape[:3])

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.dims, dtype=bool)
        return self.mask


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid map y = R x + t with orthonormal R, det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal: max |R^T R - I| = {err:.3e}")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation must be proper (det = +1), got det = {np.linalg.det(R):.12f}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self o other, the map that applies `other` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (np.abs(self.rotation - np.eye(3)).max() <= tol
                and np.abs(self.translation).max() <= tol)

    def to_dict(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.ravel()],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        R = np.asarray(d["rotation"], dtype=float).reshape(3, 3)
        return cls(R, np.asarray(d["translation"], dtype=float))


@dataclass(frozen=True)
class ViewGeometry:
    """Per-acquisition geometry: unit beam direction in the reference frame
    plus the rigid transform from the acquisition frame into it."""

    direction: np.ndarray
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=float)
        if v.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        nrm = float(np.linalg.norm(v))
        if not np.isfinite(nrm) or nrm == 0.0:
            raise ValueError("direction must be a nonzero finite vector")
        if abs(nrm - 1.0) > DIRECTION_TOL:
            raise ValueError(f"direction must be unit length, got ||v|| = {nrm:.15f}")
        v.setflags(write=False)
        object.__setattr__(self, "direction", v)


def unit_direction(v) -> np.ndarray:
    """Normalize a nonzero 3-vector to unit length."""
    v = np.asarray(v, dtype=float)
    nrm = float(np.linalg.norm(v))
    if not np.isfinite(nrm) or nrm == 0.0:
        raise ValueError("cannot normalize a zero or non-finite direction")
    return v / nrm


def select_reference(n: int) -> int:
    """Zero-based index of the middle volume in a sequence of n."""
    if n < 1:
        raise ValueError("need at least one volume to pick a reference")
    return (n - 1) // 2


def compose_chain(pairwise: list[RigidTransform], i: int, ref: int) -> RigidTransform:
    """Chain pairwise neighbor transforms into the frame-i -> frame-ref map.

    pairwise[k] maps frame k into frame k+1, so a sequence of n volumes has
    n-1 entries. For i < ref the chain composes forward; for i > ref it
    composes the inverses; i == ref gives the identity.
    """
    n = len(pairwise) + 1
    if not (0 <= i < n) or not (0 <= ref < n):
        raise ValueError(f"frame indices ({i}, {ref}) out of range for {n} volumes")
    if i > ref:
        return compose_chain(pairwise, ref, i).inverse()
    T = RigidTransform.identity()
    for k in range(i, ref):
        T = pairwise[k].compose(T)
    return T


def resample(src: ScalarVolume, T: RigidTransform, grid: GridSpec) -> ScalarVolume:
    """Resample src onto `grid` given the src-frame -> reference-frame map T.

    Each reference voxel center is pulled back through T^-1 and trilinearly
    interpolated in src. Voxels that land outside src, or whose interpolation
    stencil touches invalid src voxels with nonzero weight, are masked out.
    """
    if not isinstance(grid, GridSpec):
        grid = GridSpec(*grid)
    pts = grid.voxel_centers().reshape(-1, 3)
    local = T.inverse().apply(pts)
    coords = (local - np.asarray(src.origin)) / np.asarray(src.spacing)

    snapped = np.round(coords)
    coords = np.where(np.abs(coords - snapped) <= GRID_SNAP_TOL, snapped, coords)

    dims = np.asarray(src.dims)
    inside = np.all((coords >= 0.0) & (coords <= dims - 1), axis=1)

    i0 = np.floor(coords).astype(int)
    i0 = np.clip(i0, 0, dims - 1)
    i1 = np.minimum(i0 + 1, dims - 1)
    f = np.clip(coords - i0, 0.0, 1.0)

    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)

    vals = np.zeros(len(pts))
    valid_weight = np.zeros(len(pts))
    src_valid = src.valid_mask()
    xs = (i0[:, 0], i1[:, 0])
    ys = (i0[:, 1], i1[:, 1])
    zs = (i0[:, 2], i1[:, 2])
    for a in range(2):
        for b in range(2):
            for c in range(2):
                w = wx[:, a] * wy[:, b] * wz[:, c]
                vals += w * src.values[xs[a], ys[b], zs[c]]
                valid_weight += w * src_valid[xs[a], ys[b], zs[c]]

    out_mask = inside & (valid_weight > 1.0 - 1e-12)
    vals = np.where(out_mask, vals, 0.0)
    return ScalarVolume(vals.reshape(grid.dims), grid.spacing, grid.origin,
                        mask=out_mask.reshape(grid.dims))


# ---------------------------------------------------------------------------
# .cvol file format


def _header_bytes(kind: str, grid: GridSpec, channels: int, has_mask: bool) -> bytes:
    header = {
        "magic": "CVOL1",
        "kind": kind,
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "channels": channels,
        "mask": has_mask,
    }
    return json.dumps(header).encode("utf-8") + b"\n\x00"


def _interleave(arr4: np.ndarray) -> bytes:
    """(nx, ny, nz, ch) -> channel-interleaved x-fastest float32 bytes."""
    return np.ascontiguousarray(np.transpose(arr4, (2, 1, 0, 3)).astype("<f4")).tobytes()


def _deinterleave(buf: bytes, dims, channels: int) -> np.ndarray:
    nx, ny, nz = dims
    arr = np.frombuffer(buf, dtype="<f4").reshape(nz, ny, nx, channels)
    return np.transpose(arr, (2, 1, 0, 3)).astype(float)


def _mask_bytes(mask: np.ndarray) -> bytes:
    return np.ascontiguousarray(np.transpose(mask, (2, 1, 0)).astype(np.uint8)).tobytes()


def _write_cvol(path, kind: str, grid: GridSpec, data4: np.ndarray, mask: np.ndarray | None):
    blob = _header_bytes(kind, grid, data4.shape[3], mask is not None)
    blob += _interleave(data4)
    if mask is not None:
        blob += _mask_bytes(mask)
    with open(path, "wb") as fh:
        fh.write(blob)


def _read_cvol(path) -> tuple[dict, np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\x00")
    if sep < 0:
        raise ValueError(f"{path}: missing header terminator")
    try:
        header = json.loads(blob[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed header: {exc}") from None
    if header.get("magic") != "CVOL1":
        raise ValueError(f"{path}: bad magic {header.get('magic')!r}")
    kind = header.get("kind")
    channels = int(header.get("channels", 0))
    if kind not in ("scalar", "tensor6") or channels not in (1, 6):
        raise ValueError(f"{path}: unsupported kind/channels {kind!r}/{channels}")
    dims = [int(n) for n in header["dims"]]
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise ValueError(f"{path}: bad dims {dims}")
    nvox = dims[0] * dims[1] * dims[2]
    body = blob[sep + 2:]
    expect = nvox * channels * 4 + (nvox if header.get("mask") else 0)
    if len(body) != expect:
        raise ValueError(f"{path}: buffer size mismatch: expected {expect} bytes, got {len(body)}")
    data = _deinterleave(body[: nvox * channels * 4], dims, channels)
    if not np.all(np.isfinite(data)):
        flat = np.transpose(data, (2, 1, 0, 3)).reshape(-1, channels)
        v, c = np.argwhere(~np.isfinite(flat))[0]
        raise ValueError(f"{path}: non-finite value at voxel {v} channel {c}")
    mask = None
    if header.get("mask"):
        mflat = np.frombuffer(body[nvox * channels * 4:], dtype=np.uint8)
        mask = np.transpose(mflat.reshape(dims[2], dims[1], dims[0]), (2, 1, 0)).astype(bool)
    return header, data, mask


def write_volume(vol: ScalarVolume, path) -> None:
    _write_cvol(path, "scalar", vol.grid, vol.values[..., None], vol.mask)


def read_volume(path) -> ScalarVolume:
    header, data, mask = _read_cvol(path)
    if header["kind"] != "scalar":
        raise ValueError(f"{path}: expected a scalar volume, found {header['kind']}")
    return ScalarVolume(data[..., 0], tuple(header["spacing"]), tuple(header["origin"]), mask=mask)


def write_tensor(vol: TensorVolume, path) -> None:
    _write_cvol(path, "tensor6", vol.grid, vol.params, vol.mask)


def read_tensor(path) -> TensorVolume:
    header, data, mask = _read_cvol(path)
    if header["kind"] != "tensor6":
        raise ValueError(f"{path}: expected a tensor volume, found {header['kind']}")
    return TensorVolume(data, tuple(header["spacing"]), tuple(header["origin"]), mask=mask)


# ---------------------------------------------------------------------------
# Acquisition manifest: a JSON list of {volume, direction, transform} records.


def save_views_manifest(entries: list[dict], path) -> None:
    """Write an acquisition manifest; entries carry volume path, direction,
    and rigid transform exactly as they will be read back."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")


def load_views(path) -> list[tuple[ScalarVolume, ViewGeometry]]:
    """Load an acquisition manifest and the volumes it references.

    Relative volume paths resolve against the manifest's directory. Directions
    are normalized to unit length before constructing the geometry.
    """
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{path}: manifest must be a non-empty JSON list")
    base = os.path.dirname(os.path.abspath(path))
    views = []
    for k, entry in enumerate(entries):
        try:
            vol_path = entry["volume"]
            direction = unit_direction(entry["direction"])
            transform = RigidTransform.from_dict(entry["transform"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: entry {k} is malformed: {exc}") from None
        if not os.path.isabs(vol_path):
            vol_path = os.path.join(base, vol_path)
        vol = read_volume(vol_path)
        geom = ViewGeometry(direction, transform, source_id=os.path.basename(vol_path))
        views.append((vol, geom))
    return views
