import numpy as np
import pytest
from scipy import ndimage as ndi

from poreval.segment import (
    BinarizeParams, HysteresisThresholds, auto_thresholds, binarize_pipeline, dice, hysteresis, multi_otsu,
    threshold_response,
)
from poreval.vesselness import ScaleRange, VesselnessParams
from poreval.volume import ImageStack

from oracles import hysteresis_floodfill, otsu_bruteforce


@pytest.mark.parametrize("seed", range(5))
def test_multi_otsu_vs_bruteforce_small(seed):
    rng = np.random.default_rng(seed)
    v = np.concatenate([rng.normal(m, s, n) for m, s, n in ((0, 1, 300), (5, 1, 200), (9, 0.5, 100))])
    assert np.array_equal(multi_otsu(v, 3, bins=32), otsu_bruteforce(v, 3, bins=32))
    assert np.array_equal(multi_otsu(v, 2, bins=32), otsu_bruteforce(v, 2, bins=32))
    assert np.array_equal(multi_otsu(v, 4, bins=16), otsu_bruteforce(v, 4, bins=16))


def test_multi_otsu_separates_modes():
    v = np.concatenate([np.zeros(100), np.full(100, 10.0), np.full(100, 20.0)])
    t = multi_otsu(v, 3)
    assert 0 < t[0] < 10 < t[1] < 20


def test_multi_otsu_constant_rejected():
    with pytest.raises(ValueError):
        multi_otsu(np.ones(10))
    assert auto_thresholds(np.ones((4, 4))) is None


def test_hysteresis_hand_case():
    v = np.array([[0.0, 0.2, 0.2, 0.0, 0.2], [0.0, 0.0, 0.5, 0.0, 0.0]])
    out = hysteresis(v, 0.1, 0.3)
    assert np.array_equal(out, [[0, 1, 1, 0, 0], [0, 0, 1, 0, 0]])


@pytest.mark.parametrize("seed", range(3))
def test_hysteresis_vs_floodfill(seed):
    rng = np.random.default_rng(seed)
    v = ndi.gaussian_filter(rng.uniform(size=(24, 24, 24)), 1.0)
    v = (v - v.min()) / (v.max() - v.min())
    assert np.array_equal(hysteresis(v, 0.5, 0.7), hysteresis_floodfill(v, 0.5, 0.7))
    assert np.array_equal(hysteresis(v, 0.5, 0.7, dim=2), hysteresis_floodfill(v, 0.5, 0.7, dim=2))


def test_hysteresis_monotone(rng):
    v = ndi.gaussian_filter(rng.uniform(size=(32, 32, 32)), 1.5)
    v = (v - v.min()) / (v.max() - v.min())
    base = hysteresis(v, 0.4, 0.6)
    assert np.all(hysteresis(v, 0.3, 0.6) >= base)
    assert np.all(hysteresis(v, 0.4, 0.5) >= base)
    assert np.all(hysteresis(v, 0.5, 0.6) <= base)
    assert np.all(hysteresis(v, 0.4, 0.7) <= base)


def test_thresholds_validation():
    with pytest.raises(ValueError):
        HysteresisThresholds(0.5, 0.3)
    with pytest.raises(ValueError):
        BinarizeParams(threshold_mode="otsu")


def test_threshold_modes(rng):
    r = ndi.gaussian_filter(rng.uniform(size=(3, 32, 32)), 1.0)
    m, used = threshold_response(r, BinarizeParams(dim=3, threshold_mode="cyclegan"))
    assert (used[0].low, used[0].high) == (0.3, 0.5)
    m, used = threshold_response(r, BinarizeParams(dim=2, threshold_mode="auto"))
    assert len(used) == 3
    for k, t in enumerate(used):
        ref = multi_otsu(r[k], 3) / 2
        assert (t.low, t.high) == (float(ref[0]), float(ref[1]))


def test_binarize_tube_2d_and_3d():
    z, y, x = np.mgrid[0:32, 0:40, 0:40]
    tube = ((x - 20) ** 2 + (z * 1.0 - 16) ** 2 <= 16).astype(np.float32) * 200
    stack = ImageStack(tube, (100, 100, 100), (0, 255))
    p = BinarizeParams(VesselnessParams(ScaleRange(2, 8, 0.5)), dim=3, z_factor=1.0)
    b = binarize_pipeline(stack, p)
    assert b.bits.shape == tube.shape
    assert dice(b.bits, tube > 0) > 0.8
    p2 = BinarizeParams(VesselnessParams(ScaleRange(2, 8, 0.5)), dim=2)
    b2 = binarize_pipeline(stack, p2)
    assert b2.meta["thresholds"] == [[0.1, 0.3]]


def test_binarize_z_factor_grid():
    stack = ImageStack(np.zeros((8, 32, 32), np.float32), (100, 100, 350))
    b = binarize_pipeline(stack, BinarizeParams(VesselnessParams(ScaleRange(2, 4, 1))))
    assert b.bits.shape[0] == 28 and b.spacing == (100.0, 100.0, 100.0)
    assert not b.bits.any()
    b = binarize_pipeline(stack, BinarizeParams(VesselnessParams(ScaleRange(2, 4, 1)), z_factor="auto"))
    assert b.meta["z_factor"] == 3.5


def test_dice():
    a = np.array([1, 1, 0, 0], bool)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
