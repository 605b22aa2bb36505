"""Grid, camera and point-cloud geometry.

Calibration lives here and is consumed by scene synthesis, label
construction and the reference-point baseline. The network never sees it.
Camera frame convention: x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .tensor import ConfigError, _node


@dataclass
class CameraModel:
    intrinsics: np.ndarray  # 3x3
    extrinsics: np.ndarray  # 4x4 world -> camera
    height: int
    width: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")

    def with_extrinsics(self, extrinsics):
        return CameraModel(self.intrinsics, extrinsics, self.height, self.width)

    @property
    def center(self):
        """Camera position in world coordinates."""
        r, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return -np.linalg.solve(r, t)


def look_at(position, forward, up=(0.0, 0.0, 1.0)):
    """World->camera rigid transform for a camera at ``position`` looking along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    rot = np.stack([right, down, f])  # rows: camera axes in world
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    return ext


def pinhole(fx, fy, cx, cy):
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def project_points(points, cam):
    """World points (N,3) -> (N,3) of (u, v, depth) plus a validity mask.

    Rows with depth <= 0 are behind the camera and flagged invalid; their
    (u, v) are NaN.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pts @ cam.extrinsics[:3, :3].T + cam.extrinsics[:3, 3]
    depth = pc[:, 2]
    valid = depth > 1e-9
    uvd = np.full((len(pts), 3), np.nan)
    z = np.where(valid, depth, 1.0)
    k = cam.intrinsics
    uvd[:, 0] = np.where(valid, k[0, 0] * pc[:, 0] / z + k[0, 1] * pc[:, 1] / z + k[0, 2], np.nan)
    uvd[:, 1] = np.where(valid, k[1, 1] * pc[:, 1] / z + k[1, 2], np.nan)
    uvd[:, 2] = depth
    return uvd, valid


def unproject(uvd, cam):
    """Inverse of ``project_points`` for valid rows."""
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    pix = np.stack([uvd[:, 0], uvd[:, 1], np.ones(len(uvd))], axis=1)
    rays = np.linalg.solve(cam.intrinsics, pix.T).T
    pc = rays * uvd[:, 2:3]
    r, t = cam.extrinsics[:3, :3], cam.extrinsics[:3, 3]
    return (pc - t) @ np.linalg.inv(r).T


def perturb_extrinsics(extrinsics, sigma, seed):
    """Additive i.i.d. N(0, sigma^2) noise on the 3x4 upper block; last row kept."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    out = np.array(extrinsics, dtype=np.float64, copy=True)
    if sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    out[:3, :] += rng.normal(0.0, sigma, size=(3, 4))
    return out


# ----------------------------------------------------------------------- grids

@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    voxel_size: tuple
    extents: tuple

    def __post_init__(self):
        if any(int(e) <= 0 for e in self.extents):
            raise ConfigError(f"grid extents must be positive: {self.extents}")
        if any(v <= 0 for v in self.voxel_size):
            raise ConfigError(f"voxel size must be positive: {self.voxel_size}")

    @property
    def shape(self):
        return tuple(int(e) for e in self.extents)

    @property
    def lower(self):
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self):
        return self.lower + np.asarray(self.voxel_size) * np.asarray(self.shape)

    def cell_index(self, points):
        """Integer cell coordinates (N,3) and an in-bounds mask."""
        rel = (np.asarray(points, dtype=np.float64)[:, :3] - self.lower) / np.asarray(self.voxel_size)
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        return idx, inside

    def centers(self):
        """All cell centres, (H*W*D, 3), C-order over (h, w, d)."""
        axes = [self.lower[i] + (np.arange(n) + 0.5) * self.voxel_size[i] for i, n in enumerate(self.shape)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def shifted(self, offset):
        return GridSpec(tuple(self.lower + np.asarray(offset)), self.voxel_size, self.extents)


def normalize_to_centers(points, spec):
    """Map world points to [-1, 1]^3 where -1/+1 are the outermost cell centres of ``spec``."""
    lo = spec.lower + 0.5 * np.asarray(spec.voxel_size)
    hi = spec.upper - 0.5 * np.asarray(spec.voxel_size)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (np.asarray(points, dtype=np.float64) - lo) / span - 1.0


# ----------------------------------------------------------------- voxelizing

@dataclass
class LidarVoxelSet:
    """Voxelized cloud: rows of (x, y, z, intensity, density, range)."""

    rows: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1, 6)

    def __len__(self):
        return len(self.rows)

    @property
    def count(self):
        return len(self.rows)


def voxelize(cloud, spec):
    """Mean-aggregate points per occupied cell; out-of-bounds points are dropped."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    idx, inside = spec.cell_index(cloud)
    pts = cloud[inside]
    dropped = int(len(cloud) - inside.sum())
    if len(pts) == 0:
        return LidarVoxelSet(np.zeros((0, 6)), dropped)
    h, w, d = spec.shape
    lin = (idx[inside, 0] * w + idx[inside, 1]) * d + idx[inside, 2]
    keys, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    sums = np.stack([np.bincount(inverse, weights=pts[:, c], minlength=len(keys)) for c in range(4)], axis=1)
    means = sums / counts[:, None]
    r = np.sqrt((means[:, :3] ** 2).sum(axis=1))
    return LidarVoxelSet(np.column_stack([means, counts, r]), dropped)


def sample_voxels(vs, n, seed):
    """Uniform subset without replacement; with n >= count every voxel is kept
    (deterministically permuted) and no padding rows are added."""
    if n < 0:
        raise ConfigError(f"sample size must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    if n >= vs.count:
        pick = rng.permutation(vs.count)
    else:
        pick = rng.choice(vs.count, size=n, replace=False)
    return LidarVoxelSet(vs.rows[pick], vs.dropped)


def compression_stats(cloud, spec):
    cloud = np.asarray(cloud).reshape(-1, 4)
    voxels = voxelize(cloud, spec).count
    points = len(cloud)
    return {"points": points, "voxels": voxels, "rate": voxels / points if points else None}


def normalize_lidar_rows(rows, spec, max_density=64.0):
    """Scale voxel rows into roughly [-1, 1] before positional encoding.

    xyz -> box-normalized, intensity kept (already [0, 1]), density ->
    log-scaled against ``max_density``, range -> divided by the distance to
    the farthest box corner.
    """
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    lo, hi = spec.lower, spec.upper
    out = np.empty_like(rows)
    out[:, :3] = 2.0 * (rows[:, :3] - lo) / (hi - lo) - 1.0
    out[:, 3] = rows[:, 3]
    out[:, 4] = np.log1p(rows[:, 4]) / np.log1p(max_density)
    out[:, 5] = rows[:, 5] / np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi)))
    return out


# -------------------------------------------------------------- interpolation

def _corner_weights(queries, shape):
    q = np.clip(np.asarray(queries, dtype=np.float64), -1.0, 1.0)
    idx0, frac = [], []
    for a, n in enumerate(shape):
        pos = (q[:, a] + 1.0) * 0.5 * (n - 1)
        # normalized cell centers come back a few ulps off the integer index
        near = np.rint(pos)
        pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, max(n - 2, 0))
        idx0.append(i0)
        frac.append(pos - i0 if n > 1 else np.zeros(len(q)))
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ids = [np.minimum(idx0[a] + o, shape[a] - 1) for a, o in enumerate((dx, dy, dz))]
                w = np.ones(len(q))
                for a, o in enumerate((dx, dy, dz)):
                    w = w * (frac[a] if o else 1.0 - frac[a])
                corners.append((ids, w))
    return corners


def interpolation_matrix(queries, shape):
    """Sparse (N, prod(shape)) trilinear weights; rows sum to 1."""
    corners = _corner_weights(queries, shape)
    n = len(corners[0][1])
    rows = np.tile(np.arange(n), 8)
    cols = np.concatenate([np.ravel_multi_index(ids, shape) for ids, _ in corners])
    vals = np.concatenate([w for _, w in corners])
    # duplicate (row, col) pairs on degenerate axes are summed by the conversion
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, int(np.prod(shape))))


def grid_sample(coarse, queries):
    """Trilinear interpolation of a (C, H, W, D) tensor at (N, 3) points in [-1, 1]^3.

    Align-corners: -1 and +1 hit the outermost cell centres; queries outside
    the cube are clamped. Differentiable with respect to ``coarse``.
    ``queries`` may also be a matrix from ``interpolation_matrix`` for reuse.
    """
    c = coarse.shape[0]
    shape = coarse.shape[1:]
    if sparse.issparse(queries):
        w = queries
        if w.shape[1] != int(np.prod(shape)):
            raise ValueError(f"interpolation matrix built for {w.shape[1]} cells, grid has {shape}")
    else:
        w = interpolation_matrix(queries, shape)
    flat = coarse.data.reshape(c, -1).astype(np.float64)
    out = np.asarray(w @ flat.T)

    def bw(g):
        return (np.asarray(w.T @ g).T.reshape(coarse.shape),)

    return _node(out, (coarse,), bw, "grid_sample")


# ------------------------------------------------------------ position codes

def positional_encoding(points, channels, base=10000.0, scale=32.0):
    """Fixed sinusoidal code: per input dim, channels/(2K) (sin, cos) pairs.

    Frequencies are ``scale / base**(j/F)``, shared across input dims.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, k = pts.shape
    if channels % (2 * k):
        raise ConfigError(f"{channels} channels not divisible by 2*{k}")
    f = channels // (2 * k)
    freqs = scale / base ** (np.arange(f) / f)
    ang = pts[:, :, None] * freqs  # (N, K, F)
    out = np.empty((n, k, f, 2))
    out[..., 0] = np.sin(ang)
    out[..., 1] = np.cos(ang)
    return out.reshape(n, channels)


def reference_pixel_displacement(points, cam, noisy_cam):
    """Mean pixel shift of reference points between clean and perturbed projections.

    Only points visible (in front, inside the image) under the clean camera count.
    """
    uv0, v0 = project_points(points, cam)
    uv1, v1 = project_points(points, noisy_cam)
    inside = v0 & v1 & (uv0[:, 0] >= 0) & (uv0[:, 0] < cam.width) & (uv0[:, 1] >= 0) & (uv0[:, 1] < cam.height)
    if not inside.any():
        return 0.0
    return float(np.linalg.norm(uv1[inside, :2] - uv0[inside, :2], axis=1).mean())
