"""RGB-D to point cloud conversion, normals, downsampling and depth noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import DimensionError

FALLBACK_NORMAL = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    """Focal lengths and principal point both at half the image size."""
    if width < 1 or height < 1:
        raise ValueError("image size must be positive")
    return CameraIntrinsics(width / 2.0, height / 2.0, width / 2.0, height / 2.0)


@dataclass
class PointCloud:
    """Ordered points ``[x, y, d, r, g, b]`` with an optional pixel back-map.

    ``pixel_map[i] = (u, v)`` is the source column/row of point ``i``.
    """

    points: np.ndarray
    pixel_map: np.ndarray | None = None
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 6:
            raise DimensionError(f"points must be n×6, got {self.points.shape}")
        rgb = self.points[:, 3:]
        if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
            raise ValueError("colour channels must lie in [0, 1]")
        if self.pixel_map is not None:
            pm = np.asarray(self.pixel_map, dtype=np.int64)
            if pm.shape != (len(self.points), 2):
                raise DimensionError("pixel_map must be n×2")
            if pm.size:
                if pm[:, 0].min() < 0 or pm[:, 0].max() >= self.width or pm[:, 1].min() < 0 or pm[:, 1].max() >= self.height:
                    raise ValueError("pixel_map entries out of bounds")
                flat = pm[:, 1] * self.width + pm[:, 0]
                if len(np.unique(flat)) != len(flat):
                    raise ValueError("pixel_map is not injective")
            self.pixel_map = pm

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:]

    def permuted(self, order: np.ndarray) -> "PointCloud":
        pm = None if self.pixel_map is None else self.pixel_map[order]
        return PointCloud(self.points[order], pm, self.width, self.height)

    def gather(self, image: np.ndarray) -> np.ndarray:
        """Pick per-point values out of an H×W(×C) lattice map."""
        if self.pixel_map is None:
            raise ValueError("cloud has no pixel map")
        return image[self.pixel_map[:, 1], self.pixel_map[:, 0]]

    def scatter(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Place per-point values back on the H×W lattice."""
        if self.pixel_map is None:
            raise ValueError("cloud has no pixel map")
        values = np.asarray(values)
        out = np.full((self.height, self.width) + values.shape[1:], fill, dtype=values.dtype)
        out[self.pixel_map[:, 1], self.pixel_map[:, 0]] = values
        return out

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        if self.pixel_map is not None:
            m[self.pixel_map[:, 1], self.pixel_map[:, 0]] = True
        return m


@dataclass
class NormalField:
    normals: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.normals), dtype=bool)

    @property
    def any_degenerate(self) -> bool:
        return bool(self.degenerate.any())


def build_point_cloud(
    image: np.ndarray,
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    valid_mask: np.ndarray | None = None,
) -> PointCloud:
    """Back-project every valid pixel; points come out in row-major order."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3 and depth.shape[2] == 1:
        depth = depth[:, :, 0]
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be H×W×3, got {image.shape}")
    if depth.shape != image.shape[:2]:
        raise DimensionError(f"depth {depth.shape} does not match image {image.shape[:2]}")
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    h, w = depth.shape
    if valid_mask is None:
        valid_mask = np.ones((h, w), dtype=bool)
    elif valid_mask.shape != (h, w):
        raise DimensionError("valid_mask does not match image size")

    v, u = np.nonzero(valid_mask)
    d = depth[v, u]
    x = (u - intrinsics.cx) * d / intrinsics.fx
    y = (v - intrinsics.cy) * d / intrinsics.fy
    pts = np.column_stack([x, y, d, image[v, u]])
    return PointCloud(pts, np.column_stack([u, v]), w, h)


def reproject(cloud: PointCloud, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Inverse of the back-projection: (u, v) for points with d > 0."""
    x, y, d = cloud.xyz.T
    return np.column_stack([x * intrinsics.fx / d + intrinsics.cx, y * intrinsics.fy / d + intrinsics.cy])


def estimate_normals(cloud: PointCloud | np.ndarray, k: int = 16) -> NormalField:
    """PCA normals from each point plus its k nearest neighbours in (x, y, d).

    The smallest-eigenvalue eigenvector is flipped to face the camera
    (z <= 0). Neighbourhoods with zero spread get (0, 0, -1) and are flagged.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)[:, :3]
    n = len(xyz)
    if n < k + 1:
        raise DimensionError(f"need at least k+1={k + 1} points for normals, got {n}")
    # centre first so the result does not depend on a global offset
    centred = xyz - xyz.mean(axis=0)
    _, idx = cKDTree(centred).query(centred, k=k + 1)
    nbrs = centred[idx]
    local = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / (k + 1)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    normals[normals[:, 2] > 0] *= -1.0

    extent = float(np.ptp(centred, axis=0).max()) if n else 0.0
    trace = np.trace(cov, axis1=1, axis2=2)
    degenerate = trace <= 1e-14 * (extent * extent + 1e-30)
    normals[degenerate] = FALLBACK_NORMAL
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalField(normals, degenerate)


def voxel_downsample(cloud: PointCloud, voxel_size: float = 0.03) -> PointCloud:
    """One centroid point per occupied voxel of the (x, y, d) coordinates.

    The output depends only on the multiset of input points: points are
    sorted before accumulation and voxels are emitted in key order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / voxel_size).astype(np.int64)
    has_map = cloud.pixel_map is not None
    extra = cloud.pixel_map if has_map else np.zeros((len(cloud), 2), dtype=np.int64)
    # lexsort: last key is primary
    order = np.lexsort(
        tuple(extra[:, c] for c in (1, 0))
        + tuple(cloud.points[:, c] for c in range(5, -1, -1))
        + tuple(keys[:, c] for c in (2, 1, 0))
    )
    keys, pts, pix = keys[order], cloud.points[order], extra[order]
    change = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    ends = np.concatenate([starts[1:], [len(pts)]])

    out_pts = np.empty((len(starts), 6))
    out_pix = np.empty((len(starts), 2), dtype=np.int64)
    for j, (s, e) in enumerate(zip(starts, ends)):
        members = pts[s:e]
        c = members.sum(axis=0) / (e - s)
        out_pts[j] = c
        dist = ((members[:, :3] - c[:3]) ** 2).sum(axis=1)
        out_pix[j] = pix[s + int(np.argmin(dist))]
    out_pts[:, 3:] = np.clip(out_pts[:, 3:], 0.0, 1.0)
    return PointCloud(out_pts, out_pix if has_map else None, cloud.width, cloud.height)


def block_mean(values: np.ndarray, out_h: int = 64, out_w: int = 64, weights: np.ndarray | None = None):
    """Average an H×W(×C) map over an out_h×out_w grid of blocks.

    Block edges are ``floor(i*H/out_h)``, so H need not divide evenly.
    With ``weights`` the mean is weighted (e.g. by a validity mask) and the
    per-block weight sum is returned alongside.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[:2]
    if h < out_h or w < out_w:
        raise DimensionError(f"cannot average-downsample {h}×{w} to {out_h}×{out_w}")
    if weights is None:
        weights = np.ones((h, w))
    weights = np.asarray(weights, dtype=np.float64)
    rows = (np.arange(out_h + 1) * h) // out_h
    cols = (np.arange(out_w + 1) * w) // out_w
    wv = values * (weights if values.ndim == 2 else weights[:, :, None])
    num = np.add.reduceat(np.add.reduceat(wv, rows[:-1], axis=0), cols[:-1], axis=1)
    den = np.add.reduceat(np.add.reduceat(weights, rows[:-1], axis=0), cols[:-1], axis=1)
    safe = np.where(den > 0, den, 1.0)
    mean = num / (safe if values.ndim == 2 else safe[:, :, None])
    return mean, den


def perturb_depth(
    depth: np.ndarray,
    mode: str,
    fraction: float,
    magnitude: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """Corrupt exactly ``round(fraction*H*W)`` distinct pixels.

    ``inaccurate`` adds uniform(-magnitude, magnitude) noise (clamped at 0);
    ``hole`` zeroes the pixel.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if mode not in ("inaccurate", "hole"):
        raise ValueError(f"unknown perturbation mode {mode!r}")
    if mode == "inaccurate" and magnitude <= 0:
        raise ValueError("magnitude must be positive for inaccurate mode")
    out = np.array(depth, copy=True)
    flat = out.reshape(-1)
    count = int(round(fraction * flat.size))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat.size, size=count, replace=False)
    if mode == "hole":
        flat[chosen] = 0
    else:
        noise = rng.uniform(-magnitude, magnitude, size=count)
        flat[chosen] = np.maximum(flat[chosen] + noise, 0.0)
    return out


def average_downsample(sample, size: int = 64):
    """Block-mean every map of an ``IntrinsicSample`` onto a size×size lattice.

    Averages are taken over valid pixels only when the sample carries a
    mask; a block stays valid if any of its pixels is. Intrinsics, when
    present, are rescaled with the lattice.
    """
    import dataclasses

    h, w = sample.image.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"average downsampling needs at least {size}×{size}, got {h}×{w}")
    weights = None if sample.valid_mask is None else sample.valid_mask.astype(np.float64)

    def pool(m):
        if m is None:
            return None
        return block_mean(m, size, size, weights)[0]

    mask = None
    if weights is not None:
        mask = block_mean(weights, size, size, weights)[1] > 0
    normals = pool(sample.normals)
    if normals is not None:
        norm = np.linalg.norm(normals, axis=-1, keepdims=True)
        normals = np.where(norm > 0, normals / np.where(norm > 0, norm, 1.0), 0.0)
    intr = sample.intrinsics
    if intr is not None:
        intr = intr.scaled(size / w, size / h)
    return dataclasses.replace(
        sample,
        image=pool(sample.image),
        depth=pool(sample.depth),
        albedo=pool(sample.albedo),
        shading=pool(sample.shading),
        normals=normals,
        valid_mask=mask,
        intrinsics=intr,
    )
