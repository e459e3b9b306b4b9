"""Slow, independent reference implementations used by the tests."""

from collections import deque
from itertools import combinations, product

import numpy as np


def otsu_bruteforce(values, classes=3, bins=256):
    """Exhaustive multi-Otsu by direct between-class variance per cut set.

    Returns the centres of the last bin of each lower class for the
    lexicographically first maximizer (relative tolerance 1e-12).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    w = (hi - lo) / bins
    idx = np.minimum(((v - lo) / w).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    centres = lo + (np.arange(bins) + 0.5) * w
    p = counts / counts.sum()
    mu_t = float((p * centres).sum())
    best, best_cut = -1.0, None
    for cuts in combinations(range(bins - 1), classes - 1):
        edges = (0,) + tuple(c + 1 for c in cuts) + (bins,)
        var = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            wk = p[a:b].sum()
            if wk > 0:
                mk = (p[a:b] * centres[a:b]).sum() / wk
                var += wk * (mk - mu_t) ** 2
        if best_cut is None or var > best + 1e-12 * max(abs(best), 1e-300):
            best, best_cut = var, cuts
    return centres[list(best_cut)]


def hysteresis_floodfill(v, low, high, dim=None):
    """Breadth-first growth from every voxel >= high through voxels >= low."""
    v = np.asarray(v)
    dim = v.ndim if dim is None else dim
    out = np.zeros(v.shape, dtype=bool)
    offs = [o for o in product((-1, 0, 1), repeat=v.ndim) if any(o)]
    if dim == 2 and v.ndim == 3:
        offs = [o for o in offs if o[0] == 0]
    seeds = np.argwhere(v >= high)
    q = deque(map(tuple, seeds))
    for s in q:
        out[s] = True
    while q:
        c = q.popleft()
        for o in offs:
            n = tuple(a + b for a, b in zip(c, o))
            if all(0 <= n[i] < v.shape[i] for i in range(v.ndim)) and not out[n] and v[n] >= low:
                out[n] = True
                q.append(n)
    return out


def components_floodfill(img, connectivity=8):
    """Label a 2D binary image; labels in raster order of the first pixel."""
    img = np.asarray(img, dtype=bool)
    lab = np.zeros(img.shape, dtype=int)
    offs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offs += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    n = 0
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            if img[y, x] and not lab[y, x]:
                n += 1
                lab[y, x] = n
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy, dx in offs:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < img.shape[0] and 0 <= nx < img.shape[1] and img[ny, nx] and not lab[ny, nx]:
                            lab[ny, nx] = n
                            q.append((ny, nx))
    return lab, n


def taxonomy_bruteforce(gen, gt, n_gen, n_gt):
    """Five case counts from explicit pairwise overlap tests."""
    ov = np.zeros((n_gen + 1, n_gt + 1), dtype=bool)
    for g in range(1, n_gen + 1):
        gm = gen == g
        for t in range(1, n_gt + 1):
            ov[g, t] = bool(np.any(gm & (gt == t)))
    gdeg = ov[1:, 1:].sum(axis=1)
    tdeg = ov[1:, 1:].sum(axis=0)
    fp = int((gdeg == 0).sum())
    missing = int((tdeg == 0).sum())
    merged = int((gdeg >= 2).sum())
    split = int((tdeg >= 2).sum())
    matching = 0
    for g in range(1, n_gen + 1):
        for t in range(1, n_gt + 1):
            if ov[g, t] and gdeg[g - 1] == 1 and tdeg[t - 1] == 1:
                matching += 1
    return {"matching": matching, "missing": missing, "false_positives": fp, "merged": merged, "split": split}


def friedman_hand(m):
    """Friedman chi-square from explicitly ranked rows (higher is better)."""
    m = np.asarray(m, dtype=float)
    n, k = m.shape
    ranks = np.zeros_like(m)
    for i in range(n):
        row = m[i]
        for j in range(k):
            better = sum(1 for x in row if x > row[j])
            ties = sum(1 for x in row if x == row[j])
            ranks[i, j] = better + (ties + 1) / 2.0
    rbar = ranks.mean(axis=0)
    return 12.0 * n / (k * (k + 1)) * sum((r - (k + 1) / 2.0) ** 2 for r in rbar)


def ssim_naive(a, b, data_range=255.0, win=11, sigma=1.5):
    """Per-window double loop SSIM over the valid region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.arange(win) - (win - 1) / 2.0
    g1 = np.exp(-0.5 * (x / sigma) ** 2)
    g = np.outer(g1, g1)
    g /= g.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
