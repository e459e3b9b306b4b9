"""Patch mosaics: sliding-window extraction, overlap-averaged stitching and
per-patch background homogenization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

BACKGROUND_FRACTION = 0.10


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    origins: Tuple[Tuple[int, int], ...]  # (x, y), row-major
    source_dims: Tuple[int, int]  # (rows, cols)

    def to_json(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "stride": self.stride,
            "origins": [list(o) for o in self.origins],
            "source_dims": list(self.source_dims),
        }


def _axis_origins(n: int, size: int, stride: int) -> List[int]:
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] != n - size:
        origins.append(n - size)
    return origins


def extract_patches(image: np.ndarray, patch_size: int = 128, overlap: float = 0.25):
    """Cut ``image`` into square patches on a sliding-window grid.

    The stride is ``patch_size * (1 - overlap)``; the last row and column of
    windows are clamped to the image border, so edge patches may overlap
    their neighbours by more than ``overlap``.

    Returns
    -------
    grid : PatchGrid
    patches : np.ndarray
        Array of shape ``(n_patches, patch_size, patch_size)`` in grid order.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("image must be 2D")
    if patch_size < 1 or patch_size > min(image.shape):
        raise ValueError(f"patch size {patch_size} does not fit image {image.shape}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride_f = patch_size * (1 - overlap)
    stride = int(round(stride_f))
    if stride < 1 or not math.isclose(stride, stride_f):
        raise ValueError(f"overlap {overlap} gives a non-integer stride {stride_f}")
    ys = _axis_origins(image.shape[0], patch_size, stride)
    xs = _axis_origins(image.shape[1], patch_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    patches = np.stack([image[y : y + patch_size, x : x + patch_size] for x, y in origins])
    return PatchGrid(patch_size, stride, origins, tuple(image.shape)), patches


def stitch(grid: PatchGrid, patches: Sequence[np.ndarray]) -> np.ndarray:
    """Reassemble patches, averaging every pixel over the patches covering it."""
    patches = np.asarray(patches)
    p = grid.patch_size
    if patches.shape != (len(grid.origins), p, p):
        raise ValueError(
            f"patches shape {patches.shape} does not match grid ({len(grid.origins)}, {p}, {p})"
        )
    acc = np.zeros(grid.source_dims, dtype=np.float64)
    cnt = np.zeros(grid.source_dims, dtype=np.int64)
    for (x, y), patch in zip(grid.origins, patches):
        acc[y : y + p, x : x + p] += patch
        cnt[y : y + p, x : x + p] += 1
    if np.any(cnt == 0):
        raise ValueError("grid does not cover the source image")
    return acc / cnt


def background_level(patch: np.ndarray, fraction: float = BACKGROUND_FRACTION) -> float:
    """Mean of the lowest ``max(1, floor(fraction * N))`` pixels."""
    v = np.sort(np.asarray(patch, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty patch")
    k = max(1, int(math.floor(fraction * v.size)))
    return float(v[:k].mean())


def _exact_offset(values: np.ndarray, offset: float) -> float:
    # Snap the offset to the finest power-of-two grid that still holds every
    # result value - offset in 53 bits. Pixel values lying on the same grid
    # (always the case for float32 data spanning < 29 binades) then shift
    # exactly, so within-patch differences are preserved bit for bit.
    a = np.abs(values[values != 0])
    if a.size == 0 or offset == 0:
        return offset
    top = float(a.max()) + abs(offset)
    quantum = math.ldexp(1.0, math.frexp(top)[1] - 53)
    return round(offset / quantum) * quantum


def homogenize_background(patches, mode: str = "average", fraction: float = BACKGROUND_FRACTION):
    """Shift each patch so its background level matches the darkest patch.

    The background of a patch is the mean of its lowest ``fraction`` of
    pixels; the baseline ``B`` is the smallest background over all patches.
    Patches whose background exceeds ``B`` are shifted down by a single
    constant, so within-patch differences are preserved exactly.

    Parameters
    ----------
    patches : sequence of np.ndarray
    mode : {"average", "minimum"}
        ``"average"`` shifts by ``background - B`` (the background lands on
        ``B``). ``"minimum"`` applies ``I - (min(I) - B)`` literally.

    Returns
    -------
    out : list of np.ndarray (float64)
    log : list of dict
        One entry per patch with its background, baseline and offset.
    """
    if mode not in ("average", "minimum"):
        raise ValueError("mode must be 'average' or 'minimum'")
    patches = [np.asarray(p) for p in patches]
    if not patches:
        raise ValueError("need at least one patch")
    levels = [background_level(p, fraction) for p in patches]
    baseline = min(levels)
    out, log = [], []
    for p, b in zip(patches, levels):
        offset = 0.0
        if b > baseline:
            raw = b - baseline if mode == "average" else float(p.min()) - baseline
            offset = _exact_offset(p, raw)
        out.append(p.astype(np.float64) - offset)
        log.append({"background": b, "baseline": baseline, "offset": offset})
    return out, log
