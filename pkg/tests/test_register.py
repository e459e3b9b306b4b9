import math

import numpy as np
import pytest
from scipy import ndimage as ndi

from poreval.register import (
    RigidTransform2D, SearchWindow, apply_transform, mutual_information, register_rigid, register_stack,
)

from conftest import disk_image


def _entropy(img, bins):
    lo, hi = img.min(), img.max()
    idx = np.clip(((img - lo) * (bins / (hi - lo))).astype(int), 0, bins - 1)
    p = np.bincount(idx.ravel(), minlength=bins) / idx.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def test_mi_self_is_entropy(rng):
    x = rng.uniform(0, 1, size=(64, 64))
    assert mutual_information(x, x, 32) == pytest.approx(_entropy(x, 32), abs=1e-12)


def test_mi_independent_noise_small(rng):
    a = rng.uniform(size=(512, 512))
    b = rng.uniform(size=(512, 512))
    assert mutual_information(a, b, 64) < 0.05


def test_mi_constant_and_symmetry(rng):
    a = rng.normal(size=(32, 32))
    b = a + 0.3 * rng.normal(size=(32, 32))
    assert mutual_information(a, np.ones_like(a)) == 0.0
    assert mutual_information(a, b, 16) == pytest.approx(mutual_information(b, a, 16), abs=1e-12)
    assert mutual_information(a, b, 16) >= -1e-12


def test_apply_identity():
    img = disk_image(32)
    w, v = apply_transform(img, RigidTransform2D(0.0, 0.0, 0.0))
    assert np.array_equal(w, img) and v.all()


def test_apply_translation_ramp():
    ramp = np.tile(np.arange(10, dtype=np.float64), (4, 1))
    w, v = apply_transform(ramp, RigidTransform2D(0.0, 1.0, 0.0))
    assert not v[:, 0].any() and v[:, 1:].all()
    assert np.allclose(w[:, 1:], ramp[:, :-1])


def test_apply_rotation_symmetric_disk():
    # a radially symmetric profile is unchanged by rotation about its centre
    y, x = np.mgrid[0:33, 0:33].astype(np.float64)
    disk = np.exp(-((x - 16) ** 2 + (y - 16) ** 2) / 50.0)
    w, v = apply_transform(disk, RigidTransform2D(10.0, 0, 0))
    inner = ((x - 16) ** 2 + (y - 16) ** 2) <= 100
    assert v[inner].all()
    assert np.max(np.abs(w - disk)[inner]) < 0.01


def test_theta_bound():
    with pytest.raises(ValueError):
        RigidTransform2D(12.0, 0, 0)


def test_self_registration_identity():
    img = disk_image(64)
    t = register_rigid(img, img, SearchWindow(6, 1))
    assert (t.theta, t.tx, t.ty) == (0.0, 0.0, 0.0)


def test_recover_shift():
    fixed = disk_image(128)
    moving = ndi.shift(fixed, (-3, 5), order=1, mode="nearest")  # +5 in x, -3 in y
    t = register_rigid(moving, fixed, SearchWindow(10, 0))
    assert abs(t.tx - (-5)) <= 0.5 and abs(t.ty - 3) <= 0.5


def test_recover_rotation():
    fixed = disk_image(128)
    moving, _ = apply_transform(fixed, RigidTransform2D(1.0, 0, 0))
    moving = np.where(moving == 0, fixed.min(), moving)
    t = register_rigid(moving, fixed, SearchWindow(2, 2))
    assert abs(t.theta + 1.0) <= 0.25


def test_register_stack_mask(rng):
    fixed = np.stack([disk_image(64)] * 3)
    moving = np.stack([ndi.shift(s, (0, 2), order=1, mode="nearest") for s in fixed])
    t, out, valid = register_stack(moving, fixed, SearchWindow(4, 0))
    assert abs(t.tx + 2) <= 0.5
    assert out.shape == fixed.shape and valid.shape == fixed.shape[1:]
    assert not valid[:, -1].any()


def test_empty_window():
    with pytest.raises(ValueError):
        SearchWindow(-1, 0)
