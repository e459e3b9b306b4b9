import numpy as np
import pytest

from poreval.cc import (
    area_histogram, classify_components, compare_images, filter_small, label_components, overlap_pairs,
    wasserstein_1d,
)

from oracles import components_floodfill, taxonomy_bruteforce


def random_binary(rng, shape, p=0.45, smooth=True):
    from scipy import ndimage as ndi
    v = rng.uniform(size=shape)
    if smooth:
        v = ndi.uniform_filter(v, 3)
    return v > np.quantile(v, 1 - p)


def test_label_trivial():
    assert label_components(np.zeros((5, 5))).count == 0
    full = label_components(np.ones((4, 6)))
    assert full.count == 1 and full.areas[0] == 24
    diag = np.array([[1, 0], [0, 1]])
    assert label_components(diag, 8).count == 1
    assert label_components(diag, 4).count == 2
    with pytest.raises(ValueError):
        label_components(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("conn", [4, 8])
def test_label_vs_floodfill(rng, conn):
    img = random_binary(rng, (40, 50), smooth=False)
    lm = label_components(img, conn)
    lab, n = components_floodfill(img, conn)
    assert lm.count == n
    assert np.array_equal(lm.labels, lab)
    assert lm.areas.sum() == img.sum()
    for k in range(1, n + 1):
        ys, xs = np.nonzero(lab == k)
        assert tuple(lm.bboxes[k - 1]) == (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)


def test_filter_small():
    img = np.zeros((20, 20), bool)
    img[0:3, 0:5] = True  # 15 px
    assert filter_small(label_components(img)).count == 0
    img[10:14, 10:14] = True  # 16 px
    f = filter_small(label_components(img))
    assert f.count == 1 and f.areas[0] == 16
    lm = label_components(img)
    assert filter_small(lm, 0) is lm
    assert np.array_equal(filter_small(f).labels, f.labels)
    with pytest.raises(ValueError):
        filter_small(lm, -1)


def _blob(shape, sl):
    m = np.zeros(shape, bool)
    m[sl] = True
    return m


def test_merged_example():
    gt = _blob((20, 20), np.s_[2:6, 2:6]) | _blob((20, 20), np.s_[2:6, 10:14])
    gen = _blob((20, 20), np.s_[3:5, 3:13])
    t = classify_components(label_components(gen), label_components(gt))
    assert (t.merged, t.split, t.matching, t.missing, t.false_positives) == (1, 0, 0, 0, 0)
    assert set(t.gt_case.values()) == {"merge_participant"}


def test_split_example():
    gt = _blob((20, 30), np.s_[2:6, 2:14])
    gen = _blob((20, 30), np.s_[3:5, 3:6]) | _blob((20, 30), np.s_[3:5, 9:12]) | _blob((20, 30), np.s_[10:12, 20:25])
    t = classify_components(label_components(gen), label_components(gt))
    assert (t.split, t.false_positives, t.matching, t.merged, t.missing) == (1, 1, 0, 0, 0)


def test_mixed_chain():
    # g1 overlaps t1 and t2, t1 also overlaps g2
    gt = _blob((20, 30), np.s_[2:6, 2:10]) | _blob((20, 30), np.s_[2:6, 14:20])
    gen = _blob((20, 30), np.s_[3:5, 6:16]) | _blob((20, 30), np.s_[3:5, 2:4])
    t = classify_components(label_components(gen), label_components(gt))
    assert t.merged == 1 and t.split == 1 and t.matching == 0


def test_overlap_shape_mismatch():
    with pytest.raises(ValueError):
        overlap_pairs(np.zeros((3, 3), int), np.zeros((3, 4), int))


def _check_conservation(t):
    gtv = list(t.gt_case.values())
    genv = list(t.gen_case.values())
    assert len(gtv) == t.n_gt and len(genv) == t.n_gen
    assert t.n_gt == t.missing + t.matching + t.split + gtv.count("merge_participant")
    assert t.n_gen == t.false_positives + t.matching + t.merged + genv.count("split_participant")


@pytest.mark.parametrize("seed", range(12))
def test_taxonomy_vs_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(32, 80))
    a = random_binary(rng, (n, n), p=rng.uniform(0.2, 0.6), smooth=bool(seed % 2))
    b = random_binary(rng, (n, n), p=rng.uniform(0.2, 0.6), smooth=bool(seed % 2))
    ga, gb = label_components(a), label_components(b)
    t = classify_components(ga, gb)
    ref = taxonomy_bruteforce(ga.labels, gb.labels, ga.count, gb.count)
    assert {k: getattr(t, k) for k in ref} == ref
    _check_conservation(t)
    # swapping roles swaps the case counts
    s = classify_components(gb, ga)
    assert (s.missing, s.false_positives, s.merged, s.split, s.matching) == (
        t.false_positives, t.missing, t.split, t.merged, t.matching)
    # identical pairs
    same = classify_components(ga, ga)
    assert same.matching == ga.count and same.matching_pct == (100.0 if ga.count else None)
    assert same.missing == same.false_positives == same.merged == same.split == 0


def test_area_histogram():
    counts, norm = area_histogram(np.array([50, 150, 150]))
    assert counts.tolist() == [1, 2]
    assert np.isclose(norm.sum(), 1.0)
    assert area_histogram([99])[0].size == 1 and area_histogram([100])[0].size == 2
    c, nrm = area_histogram([])
    assert c.size == 0 and nrm.size == 0
    with pytest.raises(ValueError):
        area_histogram([1], 0)


def test_wasserstein():
    h = np.array([1, 2, 3])
    assert wasserstein_1d(h, h) == 0
    assert wasserstein_1d([1], [0, 0, 0, 1]) == pytest.approx(300.0)
    with pytest.raises(ValueError):
        wasserstein_1d([0, 0], [1])
    rng = np.random.default_rng(3)
    for _ in range(50):
        h1, h2, h3 = (rng.integers(0, 5, 8) + 0.01 for _ in range(3))
        assert wasserstein_1d(h1, h2) == pytest.approx(wasserstein_1d(h2, h1))
        assert wasserstein_1d(h1, h3) <= wasserstein_1d(h1, h2) + wasserstein_1d(h2, h3) + 1e-9


def test_wasserstein_matches_scipy():
    from scipy.stats import wasserstein_distance
    rng = np.random.default_rng(4)
    h1, h2 = rng.integers(0, 6, 10) + 1, rng.integers(0, 6, 7) + 1
    centres = np.arange(10) * 100.0
    ref = wasserstein_distance(centres, centres[:7], h1, h2)
    assert wasserstein_1d(h1, h2) == pytest.approx(ref, rel=1e-12)


def test_compare_images():
    img = _blob((40, 40), np.s_[5:15, 5:15]) | _blob((40, 40), np.s_[20:30, 20:35])
    row = compare_images(img, img)
    assert row["matching_pct"] == 100.0 and row["wd_area"] == 0.0
    row = compare_images(np.zeros_like(img), img)
    assert row["missing_pct"] == 100.0 and row["wd_area"] is None
