"""2D connected components, the five-case matching taxonomy, area
histograms and the 1-D Wasserstein distance between area distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi

MIN_AREA = 16
AREA_BIN = 100


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Labels ``1..K`` in raster order of each component's first pixel.

    ``areas[k - 1]`` and ``bboxes[k - 1]`` (row0, col0, row1, col1; half-open)
    describe component ``k``.
    """

    labels: np.ndarray
    areas: np.ndarray
    bboxes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.areas.size)


def _relabel_raster(labels: np.ndarray, n: int) -> np.ndarray:
    # order components by the flat index of their first pixel
    flat = labels.ravel()
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    values, first = values[keep], first[keep]
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[values[np.argsort(first)]] = np.arange(1, values.size + 1, dtype=np.int32)
    return lut[labels]


def _label_map(labels: np.ndarray) -> LabelMap:
    n = int(labels.max()) if labels.size else 0
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    bboxes = np.zeros((n, 4), dtype=np.int64)
    for k, sl in enumerate(ndi.find_objects(labels, max_label=n)):
        if sl is not None:
            bboxes[k] = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
    return LabelMap(labels, areas, bboxes)


def label_components(binary: np.ndarray, connectivity: int = 8) -> LabelMap:
    """Label a 2D binary image with 4- or 8-connectivity."""
    b = np.asarray(binary, dtype=bool)
    if b.ndim != 2:
        raise ValueError("label_components expects a 2D image")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = ndi.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndi.label(b, structure=structure)
    return _label_map(_relabel_raster(labels, n))


def filter_small(lm: LabelMap, min_area: int = MIN_AREA) -> LabelMap:
    """Drop components with area below ``min_area`` and re-densify ids."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    keep = np.concatenate([[False], lm.areas >= min_area])
    if keep[1:].all():
        return lm
    lut = np.zeros(keep.size, dtype=np.int32)
    lut[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    labels = lut[lm.labels]
    return _label_map(labels)


@dataclass
class CcTaxonomy:
    """Per-side case assignment of components.

    Every GT component is exactly one of missing, matching, split or
    merge participant. Every generated component is exactly one of false
    positive, matching, merged or split participant.
    """

    n_gt: int
    n_gen: int
    matching: int
    missing: int
    false_positives: int
    merged: int
    split: int
    matching_pairs: List[Tuple[int, int]] = field(default_factory=list)
    gt_case: Dict[int, str] = field(default_factory=dict)
    gen_case: Dict[int, str] = field(default_factory=dict)

    @property
    def matching_pct(self) -> Optional[float]:
        return None if self.n_gt == 0 else 100.0 * self.matching / self.n_gt

    @property
    def missing_pct(self) -> Optional[float]:
        return None if self.n_gt == 0 else 100.0 * self.missing / self.n_gt

    def summary(self) -> dict:
        gt_cases = list(self.gt_case.values())
        gen_cases = list(self.gen_case.values())
        return {
            "n_gt": self.n_gt,
            "n_gen": self.n_gen,
            "matching": self.matching,
            "missing": self.missing,
            "false_positives": self.false_positives,
            "merged": self.merged,
            "split": self.split,
            "matching_pct": self.matching_pct,
            "missing_pct": self.missing_pct,
            "gt_merge_participants": gt_cases.count("merge_participant"),
            "gen_split_participants": gen_cases.count("split_participant"),
            "convention": "per-side partition; percentages relative to GT count",
        }


def overlap_pairs(gen: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Distinct ``(gen_id, gt_id)`` pairs sharing at least one pixel."""
    gen = np.asarray(gen)
    gt = np.asarray(gt)
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch {gen.shape} vs {gt.shape}")
    both = (gen > 0) & (gt > 0)
    if not both.any():
        return np.zeros((0, 2), dtype=np.int64)
    g = gen[both].astype(np.int64)
    t = gt[both].astype(np.int64)
    key = np.unique(g * (int(gt.max()) + 1) + t)
    return np.stack(np.divmod(key, int(gt.max()) + 1), axis=1)


def classify_components(gen: LabelMap, gt: LabelMap) -> CcTaxonomy:
    """Assign the missing / matching / false positive / merged / split cases."""
    pairs = overlap_pairs(gen.labels, gt.labels)
    n_gen, n_gt = gen.count, gt.count
    deg_gen = np.bincount(pairs[:, 0], minlength=n_gen + 1)
    deg_gt = np.bincount(pairs[:, 1], minlength=n_gt + 1)
    partner_gen = np.zeros(n_gen + 1, dtype=np.int64)
    partner_gt = np.zeros(n_gt + 1, dtype=np.int64)
    partner_gen[pairs[:, 0]] = pairs[:, 1]
    partner_gt[pairs[:, 1]] = pairs[:, 0]

    gt_case, gen_case = {}, {}
    matching_pairs = []
    for t in range(1, n_gt + 1):
        d = deg_gt[t]
        if d == 0:
            gt_case[t] = "missing"
        elif d >= 2:
            gt_case[t] = "split"
        elif deg_gen[partner_gt[t]] == 1:
            gt_case[t] = "matching"
            matching_pairs.append((int(partner_gt[t]), t))
        else:
            gt_case[t] = "merge_participant"
    for g in range(1, n_gen + 1):
        d = deg_gen[g]
        if d == 0:
            gen_case[g] = "false_positive"
        elif d >= 2:
            gen_case[g] = "merged"
        elif deg_gt[partner_gen[g]] == 1:
            gen_case[g] = "matching"
        else:
            gen_case[g] = "split_participant"
    gtv = list(gt_case.values())
    genv = list(gen_case.values())
    return CcTaxonomy(
        n_gt=n_gt,
        n_gen=n_gen,
        matching=len(matching_pairs),
        missing=gtv.count("missing"),
        false_positives=genv.count("false_positive"),
        merged=genv.count("merged"),
        split=gtv.count("split"),
        matching_pairs=matching_pairs,
        gt_case=gt_case,
        gen_case=gen_case,
    )


def area_histogram(areas, bin_width: float = AREA_BIN):
    """Histogram of component areas in half-open bins ``[k w, (k+1) w)``.

    ``areas`` may be a :class:`LabelMap`. Returns ``(counts, normalized)``;
    both are empty for an empty map.
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    if isinstance(areas, LabelMap):
        areas = areas.areas
    a = np.asarray(areas, dtype=np.float64)
    if a.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    idx = np.floor(a / bin_width).astype(np.int64)
    counts = np.bincount(idx)
    return counts, counts / counts.sum()


def wasserstein_1d(h1, h2, bin_width: float = AREA_BIN) -> float:
    """W1 between two histograms on the same bin grid: sum |CDF1 - CDF2| * w."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.sum() <= 0 or h2.sum() <= 0:
        raise ValueError("histograms must have positive mass")
    n = max(h1.size, h2.size)
    h1 = np.pad(h1, (0, n - h1.size)) / h1.sum()
    h2 = np.pad(h2, (0, n - h2.size)) / h2.sum()
    return float(np.abs(np.cumsum(h1) - np.cumsum(h2)).sum() * bin_width)


def compare_images(gen_binary, gt_binary, min_area: int = MIN_AREA, bin_width: float = AREA_BIN,
                   connectivity: int = 8) -> dict:
    """Label, filter and classify one generated/GT image pair.

    ``wd_area`` is None when either side has no components.
    """
    gen = filter_small(label_components(gen_binary, connectivity), min_area)
    gt = filter_small(label_components(gt_binary, connectivity), min_area)
    tax = classify_components(gen, gt)
    wd = None
    if gen.count and gt.count:
        wd = wasserstein_1d(area_histogram(gen, bin_width)[0], area_histogram(gt, bin_width)[0], bin_width)
    row = tax.summary()
    row["wd_area"] = wd
    return row
