"""Rigid X-Y registration of slices by mutual information.

The search is an exhaustive coarse-to-fine grid: images are block-averaged
by 4x, 2x and 1x, translation steps halve with each level (4, 2, 1 px in
full-resolution units) and rotation steps go 1.0, 0.5, 0.25 degrees.
Translation is refined around the previous level's optimum; the rotation
window is searched in full at every level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage as ndi

DEFAULT_BINS = 64
LEVELS = (4, 2, 1)
ROTATION_STEPS = (1.0, 0.5, 0.25)
# candidates searched on either side of the previous level's optimum
NEIGHBOURHOOD = 2


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation (degrees) about ``center`` followed by a translation (pixels).

    A point ``p = (x, y)`` of the moving image is mapped to
    ``R(theta) (p - center) + center + (tx, ty)``.
    """

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    center: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if abs(self.theta) > 10:
            raise ValueError(f"|theta| must be <= 10 degrees, got {self.theta}")
        if not (math.isfinite(self.tx) and math.isfinite(self.ty)):
            raise ValueError("translation must be finite")

    def to_json(self) -> dict:
        return {"theta": self.theta, "tx": self.tx, "ty": self.ty}


@dataclass(frozen=True)
class SearchWindow:
    max_shift: float = 20.0
    max_angle: float = 3.0

    def __post_init__(self):
        if self.max_shift < 0 or self.max_angle < 0:
            raise ValueError("search window is empty (negative bounds)")


def _bin_indices(img: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    scaled = (img.astype(np.float64) - lo) * (bins / (hi - lo))
    return np.clip(scaled.astype(np.int64), 0, bins - 1)


def _mi_from_joint(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    return float(max(np.sum(p[nz] * np.log(p[nz] / outer[nz])), 0.0))


def mutual_information(
    a: np.ndarray,
    b: np.ndarray,
    bins: int = DEFAULT_BINS,
    mask: Optional[np.ndarray] = None,
    ranges: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
) -> float:
    """Mutual information (nats) from a ``bins x bins`` joint histogram.

    Each image is binned with equal-width bins over its own observed range
    (or ``ranges`` if given). A constant image yields 0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if ranges is None:
        ranges = ((float(a.min()), float(a.max())), (float(b.min()), float(b.max())))
    (alo, ahi), (blo, bhi) = ranges
    if ahi <= alo or bhi <= blo:
        return 0.0
    if mask is not None:
        a = a[mask]
        b = b[mask]
    ia = _bin_indices(a, bins, alo, ahi).ravel()
    ib = _bin_indices(b, bins, blo, bhi).ravel()
    counts = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    return _mi_from_joint(counts.astype(np.float64))


def _source_coords(shape, t: RigidTransform2D):
    ny, nx = shape
    cx, cy = t.center if t.center is not None else ((nx - 1) / 2.0, (ny - 1) / 2.0)
    th = math.radians(t.theta)
    c, s = math.cos(th), math.sin(th)
    # inverse map: p = R^-1 (q - center - t) + center
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    qx = xx - cx - t.tx
    qy = yy - cy - t.ty
    px = c * qx + s * qy + cx
    py = -s * qx + c * qy + cy
    return py, px


def apply_transform(image: np.ndarray, t: RigidTransform2D) -> Tuple[np.ndarray, np.ndarray]:
    """Backward-warp ``image`` with bilinear sampling.

    Returns ``(warped, valid)``; samples falling outside the source are 0
    and marked False in ``valid``.
    """
    image = np.asarray(image)
    py, px = _source_coords(image.shape, t)
    eps = 1e-9
    ny, nx = image.shape
    valid = (px >= -eps) & (px <= nx - 1 + eps) & (py >= -eps) & (py <= ny - 1 + eps)
    px = np.clip(px, 0, nx - 1)
    py = np.clip(py, 0, ny - 1)
    warped = ndi.map_coordinates(image.astype(np.float64), [py, px], order=1, mode="nearest")
    warped[~valid] = 0.0
    return warped.astype(image.dtype if image.dtype.kind == "f" else np.float64), valid


def _decimate(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img.astype(np.float64)
    ny, nx = (img.shape[0] // f) * f, (img.shape[1] // f) * f
    v = img[:ny, :nx].astype(np.float64)
    return v.reshape(ny // f, f, nx // f, f).mean(axis=(1, 3))


def _axis_candidates(center: float, step: float, count: int, bound: float):
    vals = {min(max(center + k * step, -bound), bound) for k in range(-count, count + 1)}
    return sorted(vals)


def _tie_key(c):
    theta, tx, ty = c
    return (abs(tx) + abs(ty), abs(theta), tx, ty, theta)


def register_rigid(
    moving: np.ndarray,
    fixed: np.ndarray,
    search: SearchWindow = SearchWindow(),
    bins: int = DEFAULT_BINS,
) -> RigidTransform2D:
    """Find the rigid transform that maps ``moving`` onto ``fixed``.

    MI is evaluated on the overlap of the warped moving image with
    ``fixed``; histogram ranges come from the full images so that the
    score is comparable between candidates. Ties (within 1e-12 nats)
    resolve to the smallest ``(|tx| + |ty|, |theta|)``, then
    lexicographically on ``(tx, ty, theta)``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape or moving.ndim != 2:
        raise ValueError("moving and fixed must be 2D images of equal shape")
    T, A = float(search.max_shift), float(search.max_angle)
    best = (0.0, 0.0, 0.0)
    for level, (f, rot_step) in enumerate(zip(LEVELS, ROTATION_STEPS)):
        if min(fixed.shape) // f < 8:
            continue
        mv = _decimate(moving, f)
        fx = _decimate(fixed, f)
        ranges = ((mv.min(), mv.max()), (fx.min(), fx.max()))
        ny, nx = fx.shape
        center = ((nx - 1) / 2.0, (ny - 1) / 2.0)
        n_t = int(math.ceil(T / f)) if level == 0 else NEIGHBOURHOOD
        # decimation blurs rotation, so the narrow rotation window is
        # searched in full at every level; only translation is refined locally
        n_r = int(math.ceil(A / rot_step))
        thetas = _axis_candidates(0.0, rot_step, n_r, A) if A > 0 else [0.0]
        txs = _axis_candidates(best[1], f, n_t, T) if T > 0 else [0.0]
        tys = _axis_candidates(best[2], f, n_t, T) if T > 0 else [0.0]
        scores = {}
        for th in thetas:
            for tx in txs:
                for ty in tys:
                    t = RigidTransform2D(th, tx / f, ty / f, center)
                    warped, valid = apply_transform(mv, t)
                    if valid.sum() < 16:
                        continue
                    scores[(th, tx, ty)] = mutual_information(warped, fx, bins, valid, ranges)
        if not scores:
            continue
        top = max(scores.values())
        tied = [c for c, s in scores.items() if s >= top - 1e-12]
        best = min(tied, key=_tie_key)
    theta, tx, ty = best
    return RigidTransform2D(float(theta), float(tx), float(ty))


def register_stack(moving, fixed, search: SearchWindow = SearchWindow(), bins: int = DEFAULT_BINS):
    """Register two stacks with one X-Y transform estimated on their z-means.

    Returns ``(transform, registered_voxels, valid_mask)``; the mask is the
    2D region valid in every slice.
    """
    mv = np.asarray(moving, dtype=np.float64)
    fx = np.asarray(fixed, dtype=np.float64)
    t = register_rigid(mv.mean(axis=0), fx.mean(axis=0), search, bins)
    out = np.empty(mv.shape, dtype=np.float32)
    valid = None
    for k in range(mv.shape[0]):
        w, v = apply_transform(mv[k], t)
        out[k] = w
        valid = v if valid is None else valid & v
    return t, out, valid
