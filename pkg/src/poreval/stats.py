"""Rank-based comparison of models across regions (Friedman, Nemenyi)
and t confidence intervals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import special
from scipy.stats import rankdata

log = logging.getLogger(__name__)

ALPHAS = (0.05, 0.01, 0.001)
STARS = {0.05: "*", 0.01: "**", 0.001: "***"}

# studentized range quantiles at infinite df divided by sqrt(2), k = 2..10
Q_ALPHA = {
    0.05: (1.9600, 2.3437, 2.5690, 2.7278, 2.8497, 2.9483, 3.0309, 3.1017, 3.1637),
    0.01: (2.5758, 2.9135, 3.1133, 3.2547, 3.3637, 3.4522, 3.5265, 3.5903, 3.6463),
    0.001: (3.2905, 3.5804, 3.7539, 3.8776, 3.9735, 4.0515, 4.1173, 4.1740, 4.2238),
}

# two-sided 95% t quantiles t_{0.975, df}, df = 1..30
T_975 = (
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281,
    2.2010, 2.1788, 2.1604, 2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860,
    2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555, 2.0518, 2.0484, 2.0452, 2.0423,
)


@dataclass(frozen=True)
class ScoreMatrix:
    """Scores with rows = blocks (regions) and columns = treatments (models)."""

    values: np.ndarray
    higher_is_better: bool = True
    models: Tuple[str, ...] = ()
    regions: Tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError("score matrix needs N >= 2 rows and k >= 2 columns")
        if not np.all(np.isfinite(v)):
            raise ValueError("score matrix has missing or non-finite cells")
        object.__setattr__(self, "values", v)
        if not self.models:
            object.__setattr__(self, "models", tuple(f"m{j}" for j in range(v.shape[1])))
        if len(self.models) != v.shape[1]:
            raise ValueError("model names do not match the column count")
        if v.shape[0] < 5:
            log.warning("only %d blocks: rank tests have little power", v.shape[0])

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


def _as_matrix(m) -> ScoreMatrix:
    return m if isinstance(m, ScoreMatrix) else ScoreMatrix(np.asarray(m))


def average_ranks(m) -> np.ndarray:
    """Mean rank per column; rank 1 is the best score, ties share mean ranks."""
    m = _as_matrix(m)
    v = -m.values if m.higher_is_better else m.values
    return rankdata(v, axis=1).mean(axis=0)


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function via the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


def friedman(m) -> Tuple[float, float]:
    """Friedman chi-square statistic and its p-value (df = k - 1)."""
    m = _as_matrix(m)
    n, k = m.n, m.k
    r = average_ranks(m)
    chi2 = 12.0 * n / (k * (k + 1)) * float(np.sum((r - (k + 1) / 2.0) ** 2))
    if chi2 < 1e-12:
        chi2 = 0.0
    return chi2, chi2_sf(chi2, k - 1)


def critical_difference(k: int, n: int, alpha: float = 0.05) -> float:
    if not 2 <= k <= 10:
        raise ValueError("Nemenyi critical values are tabulated for 2 <= k <= 10")
    return Q_ALPHA[alpha][k - 2] * math.sqrt(k * (k + 1) / (6.0 * n))


def stars(statistic: float, k: int) -> str:
    """Significance label for a Nemenyi statistic |dR| / sqrt(k(k+1)/(6N))."""
    if not 2 <= k <= 10:
        raise ValueError("Nemenyi critical values are tabulated for 2 <= k <= 10")
    label = "ns"
    for a in ALPHAS:
        if statistic > Q_ALPHA[a][k - 2]:
            label = STARS[a]
    return label


def nemenyi(m) -> Dict[Tuple[str, str], str]:
    """Pairwise Nemenyi significance labels in {ns, *, **, ***}.

    Keys are ``(model_i, model_j)`` for ``i < j`` in column order.
    """
    m = _as_matrix(m)
    r = average_ranks(m)
    se = math.sqrt(m.k * (m.k + 1) / (6.0 * m.n))
    out = {}
    for i in range(m.k):
        for j in range(i + 1, m.k):
            out[(m.models[i], m.models[j])] = stars(abs(r[i] - r[j]) / se, m.k)
    return out


def t_quantile(df: int) -> float:
    if not 1 <= df <= len(T_975):
        raise ValueError(f"t table covers df 1..{len(T_975)}, got {df}")
    return T_975[df - 1]


def mean_ci(values: Sequence[float], level: float = 0.95) -> Tuple[float, float, float]:
    """Mean and two-sided t interval ``mean +/- t s / sqrt(n)``."""
    if level != 0.95:
        raise ValueError("only the 95% level is tabulated")
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("mean_ci needs at least two values")
    mean = float(v.mean())
    half = t_quantile(v.size - 1) * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean, mean - half, mean + half


def variance(values: Sequence[float]) -> float:
    """Sample variance (ddof = 1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("variance needs at least two values")
    return float(v.var(ddof=1))


# metrics where a lower score is better
LOWER_IS_BETTER = {
    "mse", "wd", "fid", "kid", "cc_wd_area", "cc_missing_pct", "cc_false_positives",
    "cc_merged", "cc_split",
}


def _oriented(metric: str, value: float) -> Tuple[float, bool]:
    # graph ratios are best at 1, so rank them by |log ratio| (lower is better)
    if metric.startswith("graph_ratio_"):
        return (abs(math.log(value)) if value > 0 else math.inf), False
    return value, metric not in LOWER_IS_BETTER


def significance_table(rows: List[dict]) -> List[dict]:
    """Friedman + Nemenyi per (metric, resolution) from long-format records.

    ``rows`` carry ``region``, ``model``, ``resolution``, ``metric`` and
    ``value``. Groups that are incomplete or have fewer than two regions
    or models are skipped.
    """
    groups: Dict[Tuple[str, str], Dict[Tuple[str, str], float]] = {}
    for r in rows:
        if r.get("value") is None:
            continue
        key = (str(r["metric"]), str(r.get("resolution", "")))
        if str(r["region"]) == "all":
            continue
        groups.setdefault(key, {})[(str(r["region"]), str(r["model"]))] = float(r["value"])
    out = []
    for (metric, res) in sorted(groups):
        cells = groups[(metric, res)]
        regions = sorted({a for a, _ in cells})
        models = sorted({b for _, b in cells})
        if len(regions) < 2 or len(models) < 2 or len(models) > 10:
            continue
        if any((a, b) not in cells for a in regions for b in models):
            log.warning("skipping %s/%s: incomplete score matrix", metric, res)
            continue
        vals = np.array([[_oriented(metric, cells[(a, b)])[0] for b in models] for a in regions])
        if not np.all(np.isfinite(vals)):
            continue
        sm = ScoreMatrix(vals, _oriented(metric, 1.0)[1], tuple(models), tuple(regions))
        chi2, p = friedman(sm)
        for (mi, mj), lab in nemenyi(sm).items():
            out.append({"metric": metric, "resolution": res, "model_a": mi, "model_b": mj,
                        "friedman_chi2": chi2, "friedman_p": p, "nemenyi": lab})
    return out
