"""Ground-truth density maps from head annotations.

Pixel ``(row, col)`` has its centre at image coordinate ``(x=col, y=row)``, so
an annotation at ``(x, y)`` lands on the pixel grid without a half-pixel
offset and mirroring a point across a ``W``-wide image maps ``x`` to
``W - 1 - x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .tensor import ShapeError, sum_pool_forward

DEFAULT_BETA = 0.3
DEFAULT_KNN = 3
DEFAULT_FIXED_SIGMA = 15.0
UCSD_FIXED_SIGMA = 17.0
SIGMA_MIN = 0.5
TRUNCATE = 4.0
OUTPUT_STRIDE = 8


@dataclass
class HeadAnnotations:
    points: np.ndarray  # (n, 2) of (x, y)
    image_w: int
    image_h: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= self.image_w) | (y < 0) | (y >= self.image_h)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ValueError(
                    f"point {tuple(pts[i])} outside [0, {self.image_w}) x [0, {self.image_h})"
                )

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    grid: np.ndarray
    scale: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def count(self) -> float:
        return float(self.grid.sum(dtype=np.float64))


def adaptive_sigmas(
    ann: HeadAnnotations,
    k_nn: int = DEFAULT_KNN,
    beta: float = DEFAULT_BETA,
    fallback: float = DEFAULT_FIXED_SIGMA,
    sigma_min: float = SIGMA_MIN,
) -> np.ndarray:
    """Per-head spread ``beta * mean distance to the k_nn nearest other heads``.

    Sets with fewer than ``k_nn + 1`` heads get ``fallback`` for every head.
    """
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    pts = ann.points
    n = len(pts)
    if n == 0:
        return np.empty(0)
    if n < k_nn + 1:
        return np.full(n, float(fallback))
    dist, _ = cKDTree(pts).query(pts, k=k_nn + 1)
    # column 0 is the query point itself, but with coincident points the
    # tree may return a twin first; either way the smallest distance is 0
    # and belongs to "self" for averaging purposes.
    dbar = dist[:, 1:].mean(axis=1)
    return np.maximum(beta * dbar, sigma_min)


def _axis_weights(center: float, sigma: float, size: int):
    r = TRUNCATE * sigma
    lo = max(int(np.ceil(center - r)), 0)
    hi = min(int(np.floor(center + r)), size - 1)
    if hi < lo:
        # the whole window is clipped away; keep the nearest pixel
        lo = hi = min(max(int(round(center)), 0), size - 1)
    idx = np.arange(lo, hi + 1)
    return lo, np.exp(-0.5 * ((idx - center) / sigma) ** 2)


def render_density(ann: HeadAnnotations, sigmas, out_shape=None) -> DensityMap:
    """Sum of unit-mass truncated Gaussian stamps, one per head.

    ``sigmas`` is either a scalar (fixed kernel) or one value per head.
    Each stamp is clipped to the image and renormalized so it integrates to
    exactly one.
    """
    h, w = (ann.image_h, ann.image_w) if out_shape is None else out_shape
    if (h, w) != (ann.image_h, ann.image_w):
        raise ShapeError(
            f"out_shape {(h, w)} does not match annotation image size {(ann.image_h, ann.image_w)}"
        )
    n = len(ann)
    sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,))
    if n and not np.all(sig > 0):
        raise ValueError("every sigma must be positive")
    grid = np.zeros((h, w), dtype=np.float64)
    for (x, y), s in zip(ann.points, sig):
        x0, gx = _axis_weights(x, s, w)
        y0, gy = _axis_weights(y, s, h)
        stamp = np.outer(gy / gy.sum(), gx / gx.sum())
        grid[y0 : y0 + len(gy), x0 : x0 + len(gx)] += stamp
    return DensityMap(grid, scale=1)


def resample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a 2D mask onto a ``shape`` grid."""
    mh, mw = mask.shape
    h, w = shape
    rows = np.minimum(((np.arange(h) + 0.5) * mh / h).astype(int), mh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mw / w).astype(int), mw - 1)
    return mask[np.ix_(rows, cols)]


def apply_roi(target, roi: np.ndarray):
    """Zero everything outside the region of interest.

    ``target`` may be a :class:`DensityMap`, a 2D grid, or an ``H x W x C``
    image; the mask is resampled (nearest) onto the target's spatial grid.
    """
    roi = (np.asarray(roi) != 0).astype(np.float32)
    if isinstance(target, DensityMap):
        return DensityMap(apply_roi(target.grid, roi), target.scale)
    arr = np.asarray(target)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"apply_roi target must be 2D or HxWxC, got {arr.shape}")
    m = roi if roi.shape == arr.shape[:2] else resample_nearest(roi, arr.shape[:2])
    if m.shape != arr.shape[:2]:
        raise ShapeError(f"roi shape {m.shape} does not match target {arr.shape[:2]}")
    if arr.ndim == 3:
        m = m[..., None]
    return (arr * m).astype(arr.dtype, copy=False)


def downsample_gt(dmap: DensityMap, factor: int = OUTPUT_STRIDE) -> DensityMap:
    """Sum-pool onto the network's output grid, cropping trailing rows/cols."""
    return DensityMap(sum_pool_forward(dmap.grid, factor), dmap.scale * factor)


def gt_density(
    ann: HeadAnnotations,
    sigma="adaptive",
    k_nn: int = DEFAULT_KNN,
    beta: float = DEFAULT_BETA,
    fixed_sigma: float = DEFAULT_FIXED_SIGMA,
) -> DensityMap:
    """Full-resolution ground truth using either adaptive or fixed kernels."""
    if sigma == "adaptive":
        sig = adaptive_sigmas(ann, k_nn, beta, fallback=fixed_sigma)
    else:
        sig = float(sigma)
    return render_density(ann, sig)


def heatmap_rgb(grid: np.ndarray) -> np.ndarray:
    """8-bit RGB rendering of a density grid for visual inspection."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0, None)
    peak = g.max()
    t = g / peak if peak > 0 else g
    # blue -> cyan -> yellow -> red ramp
    r = np.clip(2 * t - 0.5, 0, 1)
    gch = np.clip(2 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1 - 2 * t, 0, 1)
    return (np.stack([r, gch, b], axis=-1) * 255).astype(np.uint8)
