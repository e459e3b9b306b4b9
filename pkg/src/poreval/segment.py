"""Binarization of vesselness responses: multi-Otsu thresholds and hysteresis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage as ndi

from .volume import BinaryVolume, ImageStack, resample_z
from .vesselness import VesselnessParams, jerman_vesselness

DEFAULT_Z_FACTOR = 3.5


@dataclass(frozen=True)
class HysteresisThresholds:
    low: float = 0.1
    high: float = 0.3

    def __post_init__(self):
        if not 0 <= self.low < self.high:
            raise ValueError(f"need 0 <= low < high, got ({self.low}, {self.high})")


DEFAULT_THRESHOLDS = HysteresisThresholds(0.1, 0.3)
CYCLEGAN_THRESHOLDS = HysteresisThresholds(0.3, 0.5)


def _histogram(values: np.ndarray, bins: int):
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ValueError("multi_otsu needs a non-constant input")
    width = (hi - lo) / bins
    idx = np.minimum(((v - lo) / width).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = lo + (np.arange(bins) + 0.5) * width
    return counts, centers


def multi_otsu(values, classes: int = 3, bins: int = 256) -> np.ndarray:
    """Multi-level Otsu thresholds by exhaustive search.

    The values are binned into ``bins`` equal-width bins over their range and
    every choice of ``classes - 1`` cut positions is scored by the
    between-class variance. Ties (relative 1e-12) go to the
    lexicographically smallest cuts. Thresholds are returned as the centres
    of the last bin of each lower class, so a value belongs to class ``k``
    when it exceeds ``k`` thresholds.
    """
    if classes not in (2, 3, 4):
        raise ValueError("classes must be 2, 3 or 4")
    counts, centers = _histogram(values, bins)
    p = counts / counts.sum()
    # cumulative zeroth and first moments, with a leading zero
    w = np.concatenate([[0.0], np.cumsum(p)])
    s = np.concatenate([[0.0], np.cumsum(p * centers)])

    def term(a, b):
        # sum over class bins a..b-1 of w * mu**2 = S**2 / W
        wk = w[b] - w[a]
        sk = s[b] - s[a]
        return np.divide(sk * sk, wk, out=np.zeros_like(sk), where=wk > 0)

    n = bins
    if classes == 2:
        i = np.arange(n - 1)
        score = term(0, i + 1) + term(i + 1, n)
        cand = i[:, None]
    elif classes == 3:
        i, j = np.triu_indices(n - 1, k=1)
        score = term(0, i + 1) + term(i + 1, j + 1) + term(j + 1, n)
        cand = np.stack([i, j], axis=1)
    else:
        combos = np.array(list(itertools.combinations(range(n - 1), 3)), dtype=np.int64)
        i, j, k = combos.T
        score = term(0, i + 1) + term(i + 1, j + 1) + term(j + 1, k + 1) + term(k + 1, n)
        cand = combos
    top = score.max()
    tied = np.flatnonzero(score >= top - 1e-12 * max(abs(top), 1e-300))
    # candidates are generated in lexicographic order
    best = cand[tied[0]]
    return centers[best]


def hysteresis(volume: np.ndarray, low: float, high: float, dim: Optional[int] = None) -> np.ndarray:
    """Two-threshold binarization.

    Keeps voxels ``>= low`` that are connected to a voxel ``>= high`` with
    maximal connectivity (8 in 2D, 26 in 3D). With ``dim=2`` on a 3D input
    every slice is processed independently.
    """
    if not low < high:
        raise ValueError("need low < high")
    v = np.asarray(volume)
    dim = v.ndim if dim is None else dim
    structure = np.ones((3,) * v.ndim, dtype=bool)
    if dim == 2 and v.ndim == 3:
        structure[0] = False
        structure[2] = False
    candidates = v >= low
    labels, n = ndi.label(candidates, structure=structure)
    if n == 0:
        return np.zeros(v.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[v >= high])] = True
    seeded[0] = False
    return seeded[labels]


@dataclass(frozen=True)
class BinarizeParams:
    """Settings for :func:`binarize_pipeline`.

    ``threshold_mode`` is ``"fixed"`` (use ``thresholds``), ``"cyclegan"``
    (0.3 / 0.5) or ``"auto"`` (3-class multi-Otsu of the response, halved).
    ``z_factor`` applies to the 3D path only; ``"auto"`` uses ``sz / sx``.
    """

    vesselness: VesselnessParams = field(default_factory=VesselnessParams)
    dim: int = 3
    threshold_mode: str = "fixed"
    thresholds: HysteresisThresholds = DEFAULT_THRESHOLDS
    z_factor: Union[float, str] = DEFAULT_Z_FACTOR

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.threshold_mode not in ("fixed", "auto", "cyclegan"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")

    def to_json(self) -> dict:
        s = self.vesselness.scales
        return {
            "scales": str(s),
            "tau": self.vesselness.tau,
            "bright_on_dark": self.vesselness.bright_on_dark,
            "dim": self.dim,
            "threshold_mode": self.threshold_mode,
            "low": self.thresholds.low,
            "high": self.thresholds.high,
            "z_factor": self.z_factor,
        }


def auto_thresholds(response: np.ndarray) -> Optional[HysteresisThresholds]:
    """Multi-Otsu (3 classes) thresholds halved; None for a constant field."""
    r = np.asarray(response)
    if not r.max() > r.min():
        return None
    t = multi_otsu(r, classes=3) / 2.0
    return HysteresisThresholds(float(t[0]), float(t[1]))


def threshold_response(response: np.ndarray, params: BinarizeParams):
    """Apply the configured hysteresis thresholds to a vesselness response.

    Returns the boolean mask and the thresholds used (one pair per slice
    for the 2D auto path).
    """
    r = np.asarray(response)
    mode = params.threshold_mode
    if mode != "auto":
        t = CYCLEGAN_THRESHOLDS if mode == "cyclegan" else params.thresholds
        return hysteresis(r, t.low, t.high, dim=params.dim), [t]
    if params.dim == 3 or r.ndim == 2:
        t = auto_thresholds(r)
        if t is None:
            return np.zeros(r.shape, dtype=bool), [None]
        return hysteresis(r, t.low, t.high, dim=params.dim), [t]
    out = np.zeros(r.shape, dtype=bool)
    used = []
    for k in range(r.shape[0]):
        t = auto_thresholds(r[k])
        used.append(t)
        if t is not None:
            out[k] = hysteresis(r[k], t.low, t.high)
    return out, used


def resolve_z_factor(z_factor, spacing) -> float:
    if z_factor == "auto":
        return spacing[2] / spacing[0]
    f = float(z_factor)
    if not f > 0:
        raise ValueError("z factor must be > 0")
    return f


def binarize_pipeline(stack: ImageStack, params: BinarizeParams = BinarizeParams(), return_response=False):
    """Vesselness followed by hysteresis thresholding.

    3D path: z resampling, 3D vesselness, thresholds. 2D path: per-slice
    vesselness and thresholds. The thresholds used are recorded in
    ``meta["thresholds"]``.
    """
    if params.dim == 3:
        f = resolve_z_factor(params.z_factor, stack.spacing)
        src = resample_z(stack, f) if stack.voxels.shape[0] > 1 and f != 1 else stack
        vol = src.voxels[0] if src.voxels.shape[0] == 1 else src.voxels
        response = jerman_vesselness(vol, params.vesselness, dim=vol.ndim)
        response = response.reshape(src.voxels.shape)
    else:
        f = 1.0
        src = stack
        response = jerman_vesselness(src.voxels, params.vesselness, dim=2)
    mask, used = threshold_response(response, params)
    meta = {
        "z_factor": f,
        "thresholds": [None if t is None else [t.low, t.high] for t in used],
    }
    out = BinaryVolume(mask, src.spacing, meta)
    if return_response:
        return out, response
    return out


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * float(np.logical_and(a, b).sum()) / float(denom)
