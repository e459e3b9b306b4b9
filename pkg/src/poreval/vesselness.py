"""Multiscale Hessian vesselness (Jerman's regularized Frangi variant).

Scales are given as vessel FWHM in pixels and mapped to Gaussian sigma by
``sigma = fwhm / (2 sqrt(2 ln 2))``. Hessians are gamma-normalized
(multiplied by sigma**2). Eigenvalues are sorted by magnitude
(|l1| <= |l2| <= |l3|); for bright vessels on a dark background the sign
is flipped so vessel interiors give positive l2, l3.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np
import scipy.fft as sfft
from scipy import ndimage as ndi

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TRUNCATE = 4.0
MIN_SIGMA = 0.3
# response ties within this margin are broken by eigenvalue strength
TIE_EPS = 1e-6


def n_threads() -> int:
    """Worker count from ``POREVAL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("POREVAL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ScaleRange:
    min_fwhm: float = 2.0
    max_fwhm: float = 24.0
    step: float = 0.5

    def __post_init__(self):
        if not 0 < self.min_fwhm <= self.max_fwhm:
            raise ValueError("need 0 < min_fwhm <= max_fwhm")
        if not self.step > 0:
            raise ValueError("step must be > 0")

    def fwhms(self) -> np.ndarray:
        n = int(math.floor((self.max_fwhm - self.min_fwhm) / self.step + 1e-9)) + 1
        return self.min_fwhm + self.step * np.arange(n)

    @classmethod
    def parse(cls, text: str) -> "ScaleRange":
        """Parse ``MIN:STEP:MAX``."""
        lo, step, hi = (float(t) for t in text.split(":"))
        return cls(lo, hi, step)

    def __str__(self):
        return f"{self.min_fwhm:g}:{self.step:g}:{self.max_fwhm:g}"


@dataclass(frozen=True)
class VesselnessParams:
    scales: ScaleRange = ScaleRange()
    tau: float = 0.5
    bright_on_dark: bool = True

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")


# Gaussian derivative kernels and Hessians

def kernel_radius(sigma: float) -> int:
    return int(TRUNCATE * sigma + 0.5)


def gaussian_kernels(sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled Gaussian correlation kernels of order 0, 1 and 2.

    The kernels are moment-corrected so that, in the interior, correlation
    reproduces constants (order 0), the slope of a linear ramp (order 1)
    and the curvature of a parabola (order 2) exactly.
    """
    r = kernel_radius(sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g0 = g / g.sum()
    g1 = x * g0
    g1 /= np.sum(x * g1)
    g2 = (x**2 / sigma**4 - 1.0 / sigma**2) * g0
    g2 -= g2.mean()
    g2 *= 2.0 / np.sum(x**2 * g2)
    return g0, g1, g2


def _component_orders(ndim: int) -> List[Tuple[int, ...]]:
    # upper triangle, row-major: (0,0), (0,1), ..., (n-1,n-1)
    out = []
    for i in range(ndim):
        for j in range(i, ndim):
            o = [0] * ndim
            o[i] += 1
            o[j] += 1
            out.append(tuple(o))
    return out


def _check_fits(shape, axes, radius):
    for ax in axes:
        if 2 * radius + 1 > shape[ax]:
            raise ValueError(
                f"kernel width {2 * radius + 1} exceeds image size {shape[ax]} along axis {ax}"
            )


def _hessian_direct(vol: np.ndarray, sigma: float, axes: Sequence[int]) -> List[np.ndarray]:
    kernels = gaussian_kernels(sigma)
    memo: Dict[Tuple[int, ...], np.ndarray] = {(): vol}
    comps = []
    for orders in _component_orders(len(axes)):
        # filter axis by axis, sharing partial products between components
        for k in range(1, len(axes) + 1):
            key = orders[:k]
            if key not in memo:
                memo[key] = ndi.correlate1d(
                    memo[orders[: k - 1]], kernels[orders[k - 1]], axis=axes[k - 1], mode="reflect"
                )
        comps.append(memo[orders])
    return comps


class _SpectralVolume:
    """Reflect-padded FFT of a volume, reusable across scales.

    Circular correlation over a reflect-padded copy equals direct
    correlation with reflect boundaries wherever the kernel stays inside
    the padding, so results match the direct path to rounding.
    """

    def __init__(self, vol: np.ndarray, axes: Sequence[int], margin: int):
        self.axes = tuple(axes)
        self.shape = vol.shape
        self.margin = margin
        pad = [(0, 0)] * vol.ndim
        for ax in self.axes:
            pad[ax] = (margin, margin)
        # numpy "symmetric" repeats the edge sample, like ndimage "reflect"
        padded = np.pad(vol, pad, mode="symmetric")
        fast = list(padded.shape)
        for i, ax in enumerate(self.axes):
            fast[ax] = sfft.next_fast_len(padded.shape[ax], real=(i == len(self.axes) - 1))
        self.padded_shape = tuple(fast)
        self.spectrum = sfft.rfftn(
            padded, s=[fast[ax] for ax in self.axes], axes=self.axes, workers=n_threads()
        )

    def _transfer(self, kernel: np.ndarray, ax: int, last: bool) -> np.ndarray:
        n = self.padded_shape[ax]
        r = (kernel.size - 1) // 2
        h = np.zeros(n, dtype=np.float64)
        h[(np.arange(kernel.size) - r) % n] = kernel
        # correlation = product with the conjugate spectrum of the kernel
        f = np.conj(np.fft.rfft(h) if last else np.fft.fft(h))
        shape = [1] * len(self.padded_shape)
        shape[ax] = f.size
        return f.reshape(shape).astype(self.spectrum.dtype)

    def hessian(self, sigma: float) -> List[np.ndarray]:
        if kernel_radius(sigma) > self.margin:
            raise ValueError("kernel radius exceeds spectral padding")
        kernels = gaussian_kernels(sigma)
        axes = self.axes
        last = len(axes) - 1
        crop = tuple(
            slice(self.margin, self.margin + self.shape[ax]) if ax in axes else slice(None)
            for ax in range(len(self.shape))
        )
        # inverse transform one axis at a time, sharing order prefixes
        memo: Dict[Tuple[int, ...], np.ndarray] = {(): self.spectrum}
        comps = []
        for orders in _component_orders(len(axes)):
            for k in range(1, len(axes) + 1):
                key = orders[:k]
                if key in memo:
                    continue
                ax = axes[k - 1]
                prod = memo[orders[: k - 1]] * self._transfer(kernels[orders[k - 1]], ax, k - 1 == last)
                if k - 1 == last:
                    full = sfft.irfft(prod, n=self.padded_shape[ax], axis=ax, workers=n_threads())
                    memo[key] = np.ascontiguousarray(full[crop], dtype=np.float32)
                else:
                    memo[key] = sfft.ifft(prod, axis=ax, overwrite_x=True, workers=n_threads())
            comps.append(memo[orders])
        return comps


def _choose_method(shape, sigma, method):
    if method != "auto":
        return method
    n = int(np.prod(shape))
    return "fft" if (n >= 1 << 18 and kernel_radius(sigma) >= 6) else "direct"


def hessian_at_scale(volume: np.ndarray, sigma: float, axes=None, method: str = "auto"):
    """Gamma-normalized Hessian of ``volume`` at Gaussian scale ``sigma``.

    Parameters
    ----------
    volume : np.ndarray
        2D or 3D array.
    sigma : float
        Gaussian standard deviation in pixels (> 0.3).
    axes : sequence of int, optional
        Axes to differentiate along (default: all). Passing ``(1, 2)`` for a
        stack computes independent per-slice 2D Hessians.
    method : {"auto", "direct", "fft"}

    Returns
    -------
    np.ndarray
        Components stacked on axis 0 in upper-triangular row-major order,
        e.g. ``(H00, H01, H11)`` in 2D, each multiplied by ``sigma**2``.
    """
    if sigma <= MIN_SIGMA:
        raise ValueError(f"sigma must be > {MIN_SIGMA}")
    vol = np.asarray(volume, dtype=np.float32)
    axes = tuple(range(vol.ndim)) if axes is None else tuple(axes)
    _check_fits(vol.shape, axes, kernel_radius(sigma))
    method = _choose_method(vol.shape, sigma, method)
    if method == "fft":
        comps = _SpectralVolume(vol, axes, kernel_radius(sigma)).hessian(sigma)
    elif method == "direct":
        comps = _hessian_direct(vol, sigma, axes)
    else:
        raise ValueError(f"unknown method {method!r}")
    s2 = np.float32(sigma**2)
    return np.stack([c * s2 for c in comps])


# Eigenvalues

@numba.njit(cache=True, inline="always")
def _eig3(a00, a01, a02, a11, a12, a22):
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    d0 = a00 - q
    d1 = a11 - q
    d2 = a22 - q
    p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1
    if p2 <= 0.0:
        return q, q, q
    p = math.sqrt(p2 / 6.0)
    b00 = d0 / p
    b11 = d1 / p
    b22 = d2 / p
    b01 = a01 / p
    b02 = a02 / p
    b12 = a12 / p
    det = (
        b00 * (b11 * b22 - b12 * b12)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    )
    r = 0.5 * det
    if r <= -1.0:
        c = 0.5
    elif r >= 1.0:
        c = 1.0
    else:
        c = math.cos(math.acos(r) / 3.0)
    s = math.sqrt(max(0.0, 1.0 - c * c))
    e1 = q + 2.0 * p * c
    # cos(phi + 2 pi / 3)
    e3 = q + 2.0 * p * (-0.5 * c - 0.8660254037844386 * s)
    e2 = 3.0 * q - e1 - e3
    # sort by magnitude
    if abs(e1) > abs(e2):
        e1, e2 = e2, e1
    if abs(e2) > abs(e3):
        e2, e3 = e3, e2
    if abs(e1) > abs(e2):
        e1, e2 = e2, e1
    return e1, e2, e3


@numba.njit(cache=True, inline="always")
def _eig2(a00, a01, a11):
    m = 0.5 * (a00 + a11)
    d = 0.5 * (a00 - a11)
    r = math.sqrt(d * d + a01 * a01)
    e1 = m + r
    e2 = m - r
    if abs(e1) > abs(e2):
        return e2, e1
    return e1, e2


@numba.njit(cache=True, nogil=True)
def _eig3_flat(h, out, start, stop):
    for i in range(start, stop):
        l1, l2, l3 = _eig3(
            np.float64(h[0, i]), np.float64(h[1, i]), np.float64(h[2, i]),
            np.float64(h[3, i]), np.float64(h[4, i]), np.float64(h[5, i]),
        )
        out[0, i] = l1
        out[1, i] = l2
        out[2, i] = l3


@numba.njit(cache=True, nogil=True)
def _eig2_flat(h, out, start, stop):
    for i in range(start, stop):
        l1, l2 = _eig2(np.float64(h[0, i]), np.float64(h[1, i]), np.float64(h[2, i]))
        out[0, i] = l1
        out[1, i] = l2


def _run_chunked(fn, n: int, *args):
    workers = n_threads()
    if workers == 1 or n < 1 << 16:
        fn(*args, 0, n)
        return
    bounds = np.linspace(0, n, workers + 1).astype(np.int64)
    with ThreadPoolExecutor(workers) as pool:
        list(pool.map(lambda k: fn(*args, bounds[k], bounds[k + 1]), range(workers)))


def eigenvalues_sym(hessian: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Closed-form eigenvalues of per-voxel symmetric 2x2 or 3x3 matrices.

    ``hessian`` has 3 (2D) or 6 (3D) components on axis 0 in the order
    returned by :func:`hessian_at_scale`. The result stacks the eigenvalues
    on axis 0, sorted by absolute value ascending. The 3x3 case uses the
    trigonometric solution of the characteristic cubic.
    """
    h = np.asarray(hessian)
    ncomp = h.shape[0]
    if ncomp not in (3, 6):
        raise ValueError("expected 3 (2D) or 6 (3D) Hessian components")
    ndim = 2 if ncomp == 3 else 3
    flat = np.ascontiguousarray(h.reshape(ncomp, -1))
    out = np.empty((ndim, flat.shape[1]), dtype=dtype)
    _run_chunked(_eig2_flat if ndim == 2 else _eig3_flat, flat.shape[1], flat, out)
    return out.reshape((ndim,) + h.shape[1:])


# Jerman response

@numba.njit(cache=True, inline="always")
def _jerman(l2, l3, floor):
    if l3 > floor:
        lrho = l3
    elif l3 > 0.0:
        lrho = floor
    else:
        lrho = 0.0
    if l2 <= 0.0 or lrho <= 0.0:
        return 0.0
    if l2 >= 0.5 * lrho:
        return 1.0
    k = 3.0 / (l2 + lrho)
    v = l2 * l2 * (lrho - l2) * k * k * k
    return min(max(v, 0.0), 1.0)


def jerman_response(l2: np.ndarray, l3: np.ndarray, lam_max, tau: float) -> np.ndarray:
    """Jerman's enhancement function for sign-flipped eigenvalues.

    ``lam_max`` is the (broadcastable) maximum of ``l3`` used to regularize
    it: l3 above ``tau * lam_max`` is kept, weaker positive values are
    raised to ``tau * lam_max`` and non-positive values become 0.
    """
    l2 = np.asarray(l2, dtype=np.float64)
    l3 = np.asarray(l3, dtype=np.float64)
    floor = tau * np.asarray(lam_max, dtype=np.float64)
    lrho = np.where(l3 > floor, l3, np.where(l3 > 0, floor, 0.0))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        mid = l2 * l2 * (lrho - l2) * (3.0 / (l2 + lrho)) ** 3
    resp = np.where(l2 >= lrho / 2.0, 1.0, mid)
    resp = np.where((l2 <= 0) | (lrho <= 0), 0.0, resp)
    return np.clip(resp, 0.0, 1.0)


@numba.njit(cache=True, nogil=True)
def _eig_l23(h, sign, is3d, l2, l3, start, stop):
    # h: (ncomp, n); writes sign-flipped l2 and l3 (l3 := l2 in 2D)
    for i in range(start, stop):
        if is3d:
            _, a, b = _eig3(
                np.float64(h[0, i]), np.float64(h[1, i]), np.float64(h[2, i]),
                np.float64(h[3, i]), np.float64(h[4, i]), np.float64(h[5, i]),
            )
        else:
            _, a = _eig2(np.float64(h[0, i]), np.float64(h[1, i]), np.float64(h[2, i]))
            b = a
        l2[i] = sign * a
        l3[i] = sign * b


@numba.njit(cache=True, nogil=True)
def _update(l2, l3, floors, slab, fwhm, eps, track, best, selected, strength, scale_map, start, stop):
    for i in range(start, stop):
        r = _jerman(np.float64(l2[i]), np.float64(l3[i]), floors[i // slab])
        if r > best[i]:
            best[i] = r
        if track:
            d = r - selected[i]
            if d > eps or (abs(d) <= eps and l2[i] > strength[i]):
                selected[i] = r
                strength[i] = l2[i]
                scale_map[i] = fwhm


def _interior_max(l3: np.ndarray, axes, margin: int, per_slice: bool) -> np.ndarray:
    sl = [slice(None)] * l3.ndim
    for ax in axes:
        n = l3.shape[ax]
        if n > 2 * margin:
            sl[ax] = slice(margin, n - margin)
    core = l3[tuple(sl)]
    if per_slice:
        m = core.reshape(core.shape[0], -1).max(axis=1)
    else:
        m = np.array([core.max()])
    return np.maximum(m.astype(np.float64), 0.0)


def jerman_vesselness(
    volume: np.ndarray,
    params: VesselnessParams = VesselnessParams(),
    dim: Optional[int] = None,
    return_scale: bool = False,
    method: str = "auto",
):
    """Multiscale Jerman vesselness in ``[0, 1]``.

    Parameters
    ----------
    volume : np.ndarray
        2D image or 3D stack ``(z, y, x)``.
    params : VesselnessParams
    dim : {2, 3}, optional
        Filter dimensionality. For a 3D input ``dim=2`` filters every slice
        independently, with the regularizing maximum taken per slice.
        Defaults to ``volume.ndim``.
    return_scale : bool
        Also return the FWHM selected at every voxel: the scale with the
        highest response, ties (within 1e-6) going to the scale with the
        strongest normalized eigenvalue ``l2``. Voxels with zero response
        get 0.
    method : {"auto", "direct", "fft"}
        Convolution backend.

    Returns
    -------
    response : np.ndarray (float32)
    scale_map : np.ndarray (float32), only if ``return_scale``
    """
    vol = np.asarray(volume, dtype=np.float32)
    dim = vol.ndim if dim is None else dim
    if dim not in (2, 3) or dim > vol.ndim:
        raise ValueError(f"dim must be 2 or 3 and <= volume.ndim, got {dim}")
    axes = tuple(range(vol.ndim - dim, vol.ndim))
    per_slice = dim == 2 and vol.ndim == 3

    # derivatives ignore the mean; subtracting it keeps constants exactly zero
    if per_slice:
        means = vol.mean(axis=(1, 2), dtype=np.float64, keepdims=True)
        centred = vol - means.astype(np.float32)
    else:
        centred = vol - np.float32(vol.mean(dtype=np.float64))

    n = vol.size
    best = np.zeros(n, dtype=np.float32)
    scale_map = np.zeros(n if return_scale else 1, dtype=np.float32)
    selected = np.zeros(n if return_scale else 1, dtype=np.float32)
    strength = np.full(n if return_scale else 1, -np.inf, dtype=np.float32)
    slab = n // vol.shape[0] if per_slice else n
    sign = -1.0 if params.bright_on_dark else 1.0

    for fwhm in params.scales.fwhms():
        _check_fits(vol.shape, axes, kernel_radius(float(fwhm) * FWHM_TO_SIGMA))

    spectral: Dict[int, _SpectralVolume] = {}
    l2 = np.empty(n, dtype=np.float32)
    l3 = np.empty(n, dtype=np.float32)
    flat_scales = params.scales.fwhms() if np.any(centred) else []
    for fwhm in flat_scales:
        sigma = float(fwhm) * FWHM_TO_SIGMA
        radius = kernel_radius(sigma)
        if _choose_method(vol.shape, sigma, method) == "fft":
            # one padded spectrum serves every scale up to a power-of-two radius
            bucket = max(8, 1 << int(math.ceil(math.log2(radius))))
            bucket = max(radius, min(bucket, min((vol.shape[a] - 1) // 2 for a in axes)))
            if bucket not in spectral:
                spectral.clear()
                spectral[bucket] = _SpectralVolume(centred, axes, bucket)
            comps = spectral[bucket].hessian(sigma)
        else:
            comps = _hessian_direct(centred, sigma, axes)
        s2 = np.float32(sigma**2)
        h = np.empty((len(comps), n), dtype=np.float32)
        for k, c in enumerate(comps):
            np.multiply(c.ravel(), s2, out=h[k])
        del comps
        _run_chunked(_eig_l23, n, h, sign, dim == 3, l2, l3)
        del h
        lam = _interior_max(l3.reshape(vol.shape), axes, int(math.ceil(2 * sigma)), per_slice)
        _run_chunked(
            _update, n, l2, l3, params.tau * lam, slab, np.float32(fwhm), TIE_EPS,
            return_scale, best, selected, strength, scale_map,
        )

    out = best.reshape(vol.shape)
    if not return_scale:
        return out
    return out, np.where(out > 0, scale_map.reshape(vol.shape), 0.0).astype(np.float32)
