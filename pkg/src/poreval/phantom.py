"""Synthetic tubule/branch networks with exact ground-truth graphs.

Tubules are smooth, near-parallel tubes running along y through the whole
volume; branches are thin straight connectors between neighbouring
tubules. Every branch adds a junction on each of the two tubules it joins,
so a network of ``T`` tubules and ``B`` branches has ``2 B`` degree-3
nodes, ``2 T`` degree-1 nodes (tubule ends on the border) and
``T + 3 B`` edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numba
import numpy as np
from scipy import ndimage as ndi

from .skelgraph import GraphMetrics
from .volume import ImageStack, upsample_nn

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TUBULE_RADIUS_RANGE = (0.5, 1.5)
BRANCH_RADIUS_RANGE = (0.15, 0.35)


@dataclass(frozen=True)
class PhantomParams:
    dims: Tuple[int, int, int] = (256, 256, 64)  # (nx, ny, nz)
    spacing: Tuple[float, float, float] = (100.0, 100.0, 350.0)  # nm
    n_tubules: int = 3
    n_branches: int = 4
    tubule_radius_um: Tuple[float, float] = (0.6, 1.0)
    branch_radius_um: Tuple[float, float] = (0.15, 0.3)
    jitter_um: float = 0.6
    tubule_level: float = 200.0
    intensity_ratio: float = 3.0
    # clearance kept between junctions and borders, in um
    clearance_um: float = 1.0

    def __post_init__(self):
        lo, hi = self.tubule_radius_um
        if not TUBULE_RADIUS_RANGE[0] <= lo <= hi <= TUBULE_RADIUS_RANGE[1]:
            raise ValueError(f"tubule radii must lie in {TUBULE_RADIUS_RANGE} um")
        lo, hi = self.branch_radius_um
        if not BRANCH_RADIUS_RANGE[0] <= lo <= hi <= BRANCH_RADIUS_RANGE[1]:
            raise ValueError(f"branch radii must lie in {BRANCH_RADIUS_RANGE} um")
        if self.n_tubules < 1 or self.n_branches < 0:
            raise ValueError("need >= 1 tubule and >= 0 branches")
        if self.n_branches and self.n_tubules < 2:
            raise ValueError("branches need at least two tubules")


@dataclass
class Tubule:
    polyline: np.ndarray  # (n, 3) points (x, y, z) in um
    radius_um: float


@dataclass
class Branch:
    p0: np.ndarray  # (x, y, z) um, on the centreline of tubule `a`
    p1: np.ndarray
    radius_um: float
    a: int
    b: int


@dataclass
class PhantomSpec:
    params: PhantomParams
    seed: int
    tubules: List[Tubule] = field(default_factory=list)
    branches: List[Branch] = field(default_factory=list)

    @property
    def junctions(self) -> List[Tuple[float, float, float]]:
        out = []
        for br in self.branches:
            out.append(tuple(float(c) for c in br.p0))
            out.append(tuple(float(c) for c in br.p1))
        return out

    def extent_um(self):
        return tuple(n * s / 1000.0 for n, s in zip(self.params.dims, self.params.spacing))

    def to_json(self) -> dict:
        return {
            "params": asdict(self.params),
            "seed": self.seed,
            "tubules": [
                {"radius_um": t.radius_um, "polyline_um": np.round(t.polyline, 6).tolist()}
                for t in self.tubules
            ],
            "branches": [
                {
                    "radius_um": b.radius_um,
                    "tubules": [b.a, b.b],
                    "p0_um": np.round(b.p0, 6).tolist(),
                    "p1_um": np.round(b.p1, 6).tolist(),
                }
                for b in self.branches
            ],
            "junctions_um": [list(np.round(j, 6)) for j in self.junctions],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def _centre(t: Tubule, y: float) -> np.ndarray:
    p = t.polyline
    return np.array([np.interp(y, p[:, 1], p[:, 0]), y, np.interp(y, p[:, 1], p[:, 2])])


def _polyline_length(p: np.ndarray) -> float:
    return float(np.sqrt((np.diff(p, axis=0) ** 2).sum(axis=1)).sum())


def _clip_y(p: np.ndarray, y0: float, y1: float) -> np.ndarray:
    inside = p[(p[:, 1] > y0) & (p[:, 1] < y1)]
    t = Tubule(p, 0.0)
    return np.vstack([_centre(t, y0), inside, _centre(t, y1)])


def _free_intervals(taken, sep, lo, hi):
    # sub-intervals of [lo, hi] at least `sep` away from every taken value
    out = [(lo, hi)]
    for t in sorted(taken):
        nxt = []
        for a, b in out:
            if t - sep > a:
                nxt.append((a, min(b, t - sep)))
            if t + sep < b:
                nxt.append((max(a, t + sep), b))
        out = [(a, b) for a, b in nxt if b > a]
    return out


def _place_branches(rng, T, n, min_sep, lo_y, hi_y):
    used = {i: [] for i in range(T)}
    out = []
    for _ in range(n):
        pairs = [a for a in range(T - 1) if _free_intervals(used[a] + used[a + 1], min_sep, lo_y, hi_y)]
        if not pairs:
            return None
        a = pairs[int(rng.integers(0, len(pairs)))]
        free = _free_intervals(used[a] + used[a + 1], min_sep, lo_y, hi_y)
        widths = np.array([hi - lo for lo, hi in free])
        cum = np.cumsum(widths)
        u = float(rng.uniform(0, cum[-1]))
        j = int(min(np.searchsorted(cum, u, side="right"), len(free) - 1))
        y = free[j][0] + (u - (cum[j] - widths[j]))
        used[a].append(y)
        used[a + 1].append(y)
        out.append((a, y))
    return out


def generate_network(params: PhantomParams = PhantomParams(), seed: int = 0) -> PhantomSpec:
    """Random network of tubules along y joined by straight branches.

    Deterministic for a fixed seed. Raises ``ValueError`` when the requested
    tubules or branches cannot be placed with the configured clearance.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = params.dims
    sx, sy, sz = (s / 1000.0 for s in params.spacing)
    X, Y, Z = (nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz
    T = params.n_tubules
    rmax = params.tubule_radius_um[1]
    jit = params.jitter_um
    gap = X / (T + 1)
    if gap < 2 * (rmax + jit) + params.clearance_um or gap - jit < rmax + params.clearance_um:
        raise ValueError(f"{T} tubules of radius {rmax} um do not fit across {X:.2f} um")
    if Z < 2 * (rmax + jit + params.clearance_um):
        raise ValueError(f"tubules of radius {rmax} um do not fit in a {Z:.2f} um deep volume")

    spec = PhantomSpec(params, seed)
    # sample beyond the borders so the tubes are cut flat by the volume
    ys = np.arange(-3 * sy, Y + 3 * sy + 1e-9, sy)
    for i in range(T):
        r = float(rng.uniform(*params.tubule_radius_um))
        x0 = gap * (i + 1)
        z0 = Z / 2.0 + rng.uniform(-1, 1) * max(0.0, Z / 2 - rmax - jit - params.clearance_um) * 0.5
        per = rng.uniform(0.8, 1.6) * Y
        ph = rng.uniform(0, 2 * np.pi, size=2)
        ax, az = rng.uniform(0.3, 1.0, size=2) * jit
        xs = x0 + ax * np.sin(2 * np.pi * ys / per + ph[0])
        zs = z0 + az * np.sin(2 * np.pi * ys / per + ph[1])
        spec.tubules.append(Tubule(np.stack([xs, ys, zs], axis=1), r))

    # branch attachment positions keep junctions apart along each tubule
    margin = rmax + params.branch_radius_um[1] + params.clearance_um
    min_sep = 2 * (rmax + params.branch_radius_um[1]) + 2 * params.clearance_um
    lo_y, hi_y = margin, Y - margin
    for attempt in range(100):
        placed = _place_branches(rng, T, params.n_branches, min_sep, lo_y, hi_y)
        if placed is not None:
            break
    else:
        raise ValueError(f"cannot place {params.n_branches} branches with the requested clearance")
    for a, y in placed:
        r = float(rng.uniform(*params.branch_radius_um))
        spec.branches.append(Branch(_centre(spec.tubules[a], y), _centre(spec.tubules[a + 1], y), r, a, a + 1))
    return spec


def ground_truth_metrics(spec: PhantomSpec) -> GraphMetrics:
    """Graph metrics implied by the construction of ``spec``."""
    Y = (spec.params.dims[1] - 1) * spec.params.spacing[1] / 1000.0
    T, B = len(spec.tubules), len(spec.branches)
    m = GraphMetrics()
    m.n_edges_tubule = T + 2 * B
    m.n_edges_branch = B
    m.n_edges_all = T + 3 * B
    m.n_nodes_degree_1 = 2 * T
    m.n_nodes_degree_3 = 2 * B
    m.total_length_tubule = sum(_polyline_length(_clip_y(t.polyline, 0.0, Y)) for t in spec.tubules)
    m.total_length_branch = sum(float(np.linalg.norm(b.p1 - b.p0)) for b in spec.branches)
    m.total_length_all = m.total_length_tubule + m.total_length_branch
    return m


@numba.njit(cache=True)
def _segment_distance(dist, a, b, radius, spacing):
    # update `dist` (um) with the distance to segment a-b near the tube
    nz, ny, nx = dist.shape
    lo = np.minimum(a, b) - radius
    hi = np.maximum(a, b) + radius
    i0 = max(int(math.floor(lo[0] / spacing[0])), 0)
    i1 = min(int(math.ceil(hi[0] / spacing[0])), nx - 1)
    j0 = max(int(math.floor(lo[1] / spacing[1])), 0)
    j1 = min(int(math.ceil(hi[1] / spacing[1])), ny - 1)
    k0 = max(int(math.floor(lo[2] / spacing[2])), 0)
    k1 = min(int(math.ceil(hi[2] / spacing[2])), nz - 1)
    d = b - a
    dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    for k in range(k0, k1 + 1):
        pz = k * spacing[2]
        for j in range(j0, j1 + 1):
            py = j * spacing[1]
            for i in range(i0, i1 + 1):
                px = i * spacing[0]
                t = 0.0
                if dd > 0:
                    t = ((px - a[0]) * d[0] + (py - a[1]) * d[1] + (pz - a[2]) * d[2]) / dd
                    t = min(max(t, 0.0), 1.0)
                qx = px - (a[0] + t * d[0])
                qy = py - (a[1] + t * d[1])
                qz = pz - (a[2] + t * d[2])
                r = math.sqrt(qx * qx + qy * qy + qz * qz)
                if r < dist[k, j, i]:
                    dist[k, j, i] = r


def _object_mask(shape, spacing_um, segments, radius) -> np.ndarray:
    dist = np.full(shape, np.inf)
    for a, b in segments:
        _segment_distance(dist, np.asarray(a, float), np.asarray(b, float), float(radius), spacing_um)
    return dist <= radius


def rasterize(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean ``(tubule_mask, branch_mask)`` of shape ``(nz, ny, nx)``."""
    nx, ny, nz = spec.params.dims
    sp = np.array(spec.params.spacing) / 1000.0
    tub = np.zeros((nz, ny, nx), dtype=bool)
    bra = np.zeros((nz, ny, nx), dtype=bool)
    for t in spec.tubules:
        p = t.polyline
        tub |= _object_mask(tub.shape, sp, list(zip(p[:-1], p[1:])), t.radius_um)
    for b in spec.branches:
        bra |= _object_mask(bra.shape, sp, [(b.p0, b.p1)], b.radius_um)
    return tub, bra


def render(spec: PhantomSpec, psf_fwhm_nm: Optional[Tuple[float, float]] = (200.0, 600.0),
           snr: float = math.inf, noise_seed: Optional[int] = None) -> ImageStack:
    """Render ``spec`` as an 8-bit-range intensity stack.

    Tubules get ``tubule_level``, branches ``tubule_level / intensity_ratio``
    (the brighter level wins where they overlap). The volume is then blurred
    with a Gaussian PSF of lateral/axial FWHM ``psf_fwhm_nm`` (``None`` for
    no blur) and corrupted with signal-dependent Gaussian noise whose
    standard deviation at the tubule level is ``tubule_level / snr``.
    ``snr = inf`` adds no noise.
    """
    p = spec.params
    tub, bra = rasterize(spec)
    vol = np.zeros(tub.shape, dtype=np.float32)
    vol[bra] = p.tubule_level / p.intensity_ratio
    vol[tub] = p.tubule_level
    if psf_fwhm_nm is not None:
        lat, ax = psf_fwhm_nm
        sx, sy, sz = p.spacing
        if lat < min(sx, sy) or ax < sz:
            raise ValueError("PSF FWHM must be at least the voxel size")
        sigma = (ax * FWHM_TO_SIGMA / sz, lat * FWHM_TO_SIGMA / sy, lat * FWHM_TO_SIGMA / sx)
        vol = ndi.gaussian_filter(vol, sigma, mode="reflect").astype(np.float32)
    if math.isfinite(snr):
        if not snr > 0:
            raise ValueError("snr must be > 0")
        rng = np.random.default_rng(spec.seed if noise_seed is None else noise_seed)
        level = p.tubule_level
        sd = (level / snr) * np.sqrt(0.5 + 0.5 * np.clip(vol, 0, None) / level)
        vol = vol + (sd * rng.standard_normal(vol.shape)).astype(np.float32)
    vol = np.clip(vol, 0.0, 255.0).astype(np.float32)
    return ImageStack(vol, p.spacing, (0.0, 255.0))


def degrade(stack: ImageStack, factor: int, noise_sd: float = 0.0, seed: int = 0) -> ImageStack:
    """Simulate a coarser lateral pixel: block mean, optional noise, NN upsample."""
    if factor not in (1, 2, 4, 8):
        raise ValueError("factor must be 1, 2, 4 or 8")
    if factor == 1 and noise_sd == 0:
        return stack
    v = stack.voxels
    nz, ny, nx = v.shape
    if ny % factor or nx % factor:
        raise ValueError(f"dims ({nx}, {ny}) not divisible by {factor}")
    low = v.reshape(nz, ny // factor, factor, nx // factor, factor).mean(axis=(2, 4), dtype=np.float64)
    if noise_sd > 0:
        low = low + noise_sd * np.random.default_rng(seed).standard_normal(low.shape)
    lo, hi = stack.intensity_range
    low = np.clip(low, lo, hi).astype(np.float32)
    up = np.stack([upsample_nn(s, (ny, nx)) for s in low])
    return ImageStack(up, stack.spacing, stack.intensity_range)
