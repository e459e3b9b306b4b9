"""Full-reference image quality metrics and distribution distances.

All metrics take 2D images. Stack scores average the per-slice values;
slices whose score is unbounded (PSNR of identical slices) or undefined
(NCC of a constant slice) are left out and counted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi
from scipy import signal

log = logging.getLogger(__name__)

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
HAARPSI_C = 30.0
HAARPSI_ALPHA = 4.2


@dataclass
class MetricRecord:
    region: str
    model: str
    resolution: str
    metric: str
    value: Optional[float]
    aggregation: str = "per-image-mean"
    flag: str = ""  # "", "unbounded" or "undefined"
    n_slices: int = 0
    n_excluded: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 255.0) -> float:
    """PSNR in dB; ``inf`` when the images are identical."""
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    m = mse(a, b)
    if m == 0:
        return math.inf
    return float(10.0 * math.log10(data_range**2 / m))


def ncc(a, b) -> float:
    """Normalized cross-correlation (population statistics); NaN if either is constant."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.mean(da * da)))
    sb = math.sqrt(float(np.mean(db * db)))
    if sa == 0 or sb == 0:
        return math.nan
    return float(np.clip(np.sum(da * db) / (a.size * sa * sb), -1.0, 1.0))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, w1: np.ndarray) -> np.ndarray:
    r = (w1.size - 1) // 2
    out = ndi.correlate1d(img, w1, axis=0, mode="constant")
    out = ndi.correlate1d(out, w1, axis=1, mode="constant")
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim_maps(a, b, data_range: float = 255.0, win: int = SSIM_WIN, sigma: float = SSIM_SIGMA):
    """Luminance and contrast-structure maps over the valid window positions."""
    a, b = _pair(a, b)
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    w = gaussian_window(win, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a**2
    sbb = _filter_valid(b * b, w) - mu_b**2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return lum, cs


def ssim(a, b, data_range: float = 255.0, return_cs: bool = False):
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5) over the valid region.

    With ``return_cs`` also returns the mean contrast-structure term.
    """
    if np.array_equal(a, b):
        return (1.0, 1.0) if return_cs else 1.0
    lum, cs = ssim_maps(a, b, data_range)
    s = float(np.mean(lum * cs))
    return (s, float(np.mean(cs))) if return_cs else s


def _pool2(img: np.ndarray) -> np.ndarray:
    ny, nx = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    v = img[:ny, :nx]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def ms_ssim(a, b, data_range: float = 255.0, weights=MS_SSIM_WEIGHTS) -> float:
    """Five-scale SSIM.

    Scales are produced by 2x2 average pooling. The result is
    ``prod_{j<5} cs_j ** w_j * ssim_5 ** w_5``; negative contrast-structure
    means are clamped to 0 before exponentiation.
    """
    a, b = _pair(a, b)
    n = len(weights)
    if min(a.shape) < SSIM_WIN * 2 ** (n - 1):
        raise ValueError(f"image {a.shape} too small for {n} scales")
    if np.array_equal(a, b):
        return 1.0
    out = 1.0
    for j, wj in enumerate(weights):
        s, cs = ssim(a, b, data_range, return_cs=True)
        if j == n - 1:
            out *= max(s, 0.0) ** wj
        else:
            out *= max(cs, 0.0) ** wj
            a, b = _pool2(a), _pool2(b)
    return float(out)


def _conv_same(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # correlation with the kernel, 'same' output as in the reference code
    return signal.convolve2d(img, kernel[::-1, ::-1], mode="same")


def _haar_decompose(img: np.ndarray, n_scales: int = 3) -> np.ndarray:
    coeffs = np.zeros(img.shape + (2 * n_scales,))
    for s in range(1, n_scales + 1):
        f = 2.0 ** (-s) * np.ones((2**s, 2**s))
        f[: f.shape[0] // 2, :] *= -1
        coeffs[:, :, s - 1] = _conv_same(img, f)
        coeffs[:, :, s + n_scales - 1] = _conv_same(img, f.T)
    return coeffs


def haarpsi(a, b, data_range: float = 255.0, subsample: bool = False) -> float:
    """Haar wavelet-based perceptual similarity index in (0, 1].

    Inputs are rescaled to [0, 255]. Local similarities come from the
    magnitudes of the first two Haar levels, weights from the third level.
    ``subsample`` applies the optional 2x2 mean pre-filter and decimation.
    """
    a, b = _pair(a, b)
    if min(a.shape) < 8:
        raise ValueError("haarpsi needs images of at least 8x8")
    if np.array_equal(a, b):
        return 1.0
    k = 255.0 / data_range
    a, b = a * k, b * k
    if subsample:
        a = _conv_same(a, np.ones((2, 2)) / 4.0)[::2, ::2]
        b = _conv_same(b, np.ones((2, 2)) / 4.0)[::2, ::2]
    n = 3
    ca = _haar_decompose(a, n)
    cb = _haar_decompose(b, n)
    num = 0.0
    den = 0.0
    for o in range(2):
        w = np.maximum(np.abs(ca[:, :, 2 + o * n]), np.abs(cb[:, :, 2 + o * n]))
        ma = np.abs(ca[:, :, [o * n, 1 + o * n]])
        mb = np.abs(cb[:, :, [o * n, 1 + o * n]])
        sim = np.sum((2 * ma * mb + HAARPSI_C) / (ma**2 + mb**2 + HAARPSI_C), axis=2) / 2
        num += np.sum(w / (1.0 + np.exp(-HAARPSI_ALPHA * sim)))
        den += np.sum(w)
    if den == 0:
        return math.nan
    m = num / den
    return float((np.log(m / (1 - m)) / HAARPSI_ALPHA) ** 2)


def intensity_histogram(img, bins: int = 256, value_range: Tuple[float, float] = (0.0, 255.0)):
    """Normalized histogram on ``bins`` bins centred at ``lo + k (hi - lo) / (bins - 1)``."""
    lo, hi = value_range
    if not hi > lo or bins < 2:
        raise ValueError("need hi > lo and bins >= 2")
    w = (hi - lo) / (bins - 1)
    v = np.asarray(img, dtype=np.float64).ravel()
    idx = np.clip(np.floor((v - lo) / w + 0.5).astype(np.int64), 0, bins - 1)
    h = np.bincount(idx, minlength=bins).astype(np.float64)
    return h / h.sum(), w


def wd_intensity(a, b, bins: int = 256, value_range: Tuple[float, float] = (0.0, 255.0)) -> float:
    """1-D Wasserstein distance between intensity histograms on a shared grid."""
    ha, w = intensity_histogram(a, bins, value_range)
    hb, _ = intensity_histogram(b, bins, value_range)
    return float(np.abs(np.cumsum(ha) - np.cumsum(hb)).sum() * w)


def _features(a, b):
    A = np.asarray(a, dtype=np.float64)
    B = np.asarray(b, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError("need at least two rows per feature set")
    return A, B


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feat_a, feat_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with sample
    covariances. The trace of the square root is taken from the
    eigenvalues of the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``;
    negative eigenvalues are clamped to 0 with a warning.
    """
    A, B = _features(feat_a, feat_b)
    mu = A.mean(axis=0) - B.mean(axis=0)
    sa = np.atleast_2d(np.cov(A, rowvar=False))
    sb = np.atleast_2d(np.cov(B, rowvar=False))
    ra = _sym_sqrt(sa)
    m = ra @ sb @ ra
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    if np.any(ev < 0):
        scale = max(float(np.abs(ev).max()), 1e-300)
        if np.any(ev < -1e-10 * scale):
            log.warning("frechet_distance: clamped %d negative eigenvalues", int(np.sum(ev < 0)))
        ev = np.clip(ev, 0, None)
    val = float(mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * np.sqrt(ev).sum())
    return max(val, 0.0) if abs(val) < 1e-9 * max(1.0, float(np.trace(sa) + np.trace(sb))) else val


def kid(feat_a, feat_b, degree: int = 3) -> float:
    """Unbiased MMD^2 with the kernel ``(x.y / D + 1) ** degree``."""
    A, B = _features(feat_a, feat_b)
    d = A.shape[1]
    kaa = (A @ A.T / d + 1.0) ** degree
    kbb = (B @ B.T / d + 1.0) ** degree
    kab = (A @ B.T / d + 1.0) ** degree
    m, n = A.shape[0], B.shape[0]
    taa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    tbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(taa + tbb - 2.0 * kab.mean())


def load_features(path) -> np.ndarray:
    """Read a feature matrix from a ``.json`` header and ``.raw`` f32 payload."""
    p = Path(path)
    hdr = p if p.suffix == ".json" else p.with_suffix(".json")
    meta = json.loads(hdr.read_text())
    rows, dim = int(meta["rows"]), int(meta["dim"])
    raw = hdr.with_suffix(".raw").read_bytes()
    if len(raw) != rows * dim * 4:
        raise ValueError(f"payload has {len(raw)} bytes, header implies {rows * dim * 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float64)


def save_features(path, feats) -> Path:
    f = np.ascontiguousarray(feats, dtype="<f4")
    hdr = Path(path).with_suffix(".json")
    hdr.write_text(json.dumps({"rows": int(f.shape[0]), "dim": int(f.shape[1])}))
    hdr.with_suffix(".raw").write_bytes(f.tobytes())
    return hdr


def slice_metrics(data_range: float, value_range: Tuple[float, float]) -> Dict[str, Callable]:
    return {
        "mse": mse,
        "psnr": lambda a, b: psnr(a, b, data_range),
        "ncc": ncc,
        "ssim": lambda a, b: ssim(a, b, data_range),
        "ms_ssim": lambda a, b: ms_ssim(a, b, data_range),
        "haarpsi": lambda a, b: haarpsi(a, b, data_range),
        "wd": lambda a, b: wd_intensity(a, b, 256, value_range),
    }


METRICS = ("mse", "psnr", "ncc", "ssim", "ms_ssim", "haarpsi", "wd")


def stack_score(metric: str, stack_a, stack_b, data_range: Optional[float] = None,
                value_range: Optional[Tuple[float, float]] = None, mask=None,
                region: str = "", model: str = "", resolution: str = "") -> MetricRecord:
    """Per-slice metric averaged over a stack.

    ``stack_a`` is the generated stack and ``stack_b`` the reference; both
    may be :class:`~poreval.volume.ImageStack` or ``(nz, ny, nx)`` arrays.
    The data range defaults to the reference's declared range. ``mask`` (2D)
    restricts evaluation to its bounding box. Slices scoring ``inf`` or NaN
    are excluded and counted; if every slice is unbounded the record carries
    ``value=None`` and ``flag="unbounded"``.
    """
    va = getattr(stack_a, "voxels", stack_a)
    vb = getattr(stack_b, "voxels", stack_b)
    va = np.asarray(va)
    vb = np.asarray(vb)
    if va.ndim == 2:
        va, vb = va[None], vb[None]
    if va.shape[0] != vb.shape[0]:
        raise ValueError("stacks have different slice counts")
    if value_range is None:
        value_range = getattr(stack_b, "intensity_range", None) or (float(vb.min()), float(vb.max()))
    if data_range is None:
        data_range = float(value_range[1] - value_range[0]) or 1.0
    if mask is not None:
        rows = np.flatnonzero(np.asarray(mask).any(axis=1))
        cols = np.flatnonzero(np.asarray(mask).any(axis=0))
        if rows.size == 0:
            raise ValueError("empty evaluation mask")
        sl = (slice(None), slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        va, vb = va[sl], vb[sl]
    fn = slice_metrics(data_range, value_range)[metric]
    vals = [fn(va[k], vb[k]) for k in range(va.shape[0])]
    if not vals:
        raise ValueError("no slices to score")
    finite = [v for v in vals if math.isfinite(v)]
    n_inf = sum(1 for v in vals if math.isinf(v))
    excluded = len(vals) - len(finite)
    if excluded:
        log.info("stack_score %s: excluded %d of %d slices", metric, excluded, len(vals))
    if finite:
        value, flag = float(np.mean(finite)), ""
    elif n_inf:
        value, flag = None, "unbounded"
    else:
        value, flag = None, "undefined"
    return MetricRecord(region, model, resolution, metric, value, "per-image-mean", flag, len(vals), excluded)
