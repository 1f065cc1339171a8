import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.registration import phase_cross_correlation

from misrsat.data import (
    DegradationSpec,
    Raster,
    Revisit,
    Scene,
    Split,
    area_downsample,
    assign_split,
    extract_patches,
    generate_synthetic_scene,
    split_scene,
    usable_revisits,
)


def _scene_with_fractions(fractions, shape=(4, 4)):
    revs = []
    for i, f in enumerate(fractions):
        mask = np.zeros(shape, bool)
        mask.flat[: int(round(f * mask.size))] = True
        revs.append(Revisit(Raster(np.zeros((1, *shape)), 10.0), dt.date(2020, 1, 1 + i), mask))
    hr = Raster(np.zeros((1, 2 * shape[0], 2 * shape[1])), 5.0)
    return Scene("s", tuple(revs), hr)


# --- split_scene -------------------------------------------------------------------


def test_split_examples():
    dims, patch = (100, 100), (10, 10)
    labels = split_scene(dims, patch)
    assert labels[(0, 0)] is Split.TRAIN
    assert assign_split((85, 10), dims, patch) is Split.VAL
    assert assign_split((75, 10), dims, patch) is None
    assert (75, 10) not in split_scene(dims, patch, stride=(5, 5))
    assert assign_split((85, 60), dims, patch) is Split.TEST
    assert assign_split((85, 45), dims, patch) is None  # straddles the midline


def test_split_rejects_oversized_patch():
    with pytest.raises(ValueError):
        split_scene((10, 10), (11, 4))


@settings(max_examples=60, deadline=None)
@given(
    H=st.integers(8, 60),
    W=st.integers(8, 60),
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    stride=st.integers(1, 4),
)
def test_splits_never_share_pixels(H, W, h, w, stride):
    labels = split_scene((H, W), (h, w), stride=(stride, stride))
    owner = np.full((H, W), "", dtype=object)
    for (r, c), lab in labels.items():
        region = owner[r : r + h, c : c + w]
        assert all(v in ("", lab.value) for v in region.ravel())
        owner[r : r + h, c : c + w] = lab.value
    # determinism
    assert labels == split_scene((H, W), (h, w), stride=(stride, stride))


# --- usable_revisits -----------------------------------------------------------------


def test_usable_revisits_threshold():
    scene = _scene_with_fractions([0.0, 0.625, 0.4375])
    kept = usable_revisits(scene)
    assert [scene.revisits.index(r) for r in kept] == [0, 2]


def test_usable_revisits_extremes():
    assert len(usable_revisits(_scene_with_fractions([0, 0, 0]))) == 3
    assert usable_revisits(_scene_with_fractions([1, 1])) == []


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 16), min_size=1, max_size=6))
def test_usable_revisits_idempotent(counts):
    scene = _scene_with_fractions([c / 16 for c in counts])
    once = usable_revisits(scene)
    if once:
        again = usable_revisits(Scene("s", tuple(once), scene.hr_reference))
        assert [id(r) for r in again] == [id(r) for r in once]


# --- types ----------------------------------------------------------------------------------


def test_revisit_fraction_must_match_mask():
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    r = Revisit(Raster(np.zeros((1, 2, 2)), 10.0), dt.date(2020, 1, 1), mask)
    assert r.cloud_fraction == 0.25
    with pytest.raises(ValueError):
        Revisit(Raster(np.zeros((1, 2, 2)), 10.0), dt.date(2020, 1, 1), mask, cloud_fraction=0.5)
    with pytest.raises(ValueError):
        Revisit(Raster(np.zeros((1, 2, 2)), 10.0), dt.date(2020, 1, 1), np.zeros((3, 2), bool))


def test_raster_rejects_bad_values():
    with pytest.raises(ValueError):
        Raster(np.array([[[np.nan]]]), 10.0)
    with pytest.raises(ValueError):
        Raster(np.zeros((1, 2, 2)), 0.0)


def test_types_are_immutable():
    scene = generate_synthetic_scene(0, 2, 1, (16, 16), 2)
    with pytest.raises(ValueError):
        scene.hr_reference.pixels[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        scene.revisits[0].cloud_mask[0, 0] = True


def test_patch_hr_is_exact_multiple():
    scene = generate_synthetic_scene(3, 3, 2, (60, 60), 3)
    for p in extract_patches(scene, (5, 5)):
        assert p.hr_target.shape == (2, 15, 15)
        assert p.split is assign_split(p.origin, scene.lr_shape, (5, 5))


# --- synthetic generator --------------------------------------------------------------------


def test_identity_degradation_is_exact():
    deg = DegradationSpec.identity()
    scene = generate_synthetic_scene(7, 1, 3, (24, 24), 1, deg)
    np.testing.assert_array_equal(scene.revisits[0].raster.pixels, scene.hr_reference.pixels)


def test_generator_is_deterministic():
    deg = DegradationSpec(cloud_probability=0.8, color_gain=(1.1, 0.9), color_offset=(0.02, 0.0))
    a = generate_synthetic_scene(11, 4, 2, (32, 32), 2, deg)
    b = generate_synthetic_scene(11, 4, 2, (32, 32), 2, deg)
    np.testing.assert_array_equal(a.hr_reference.pixels, b.hr_reference.pixels)
    for ra, rb in zip(a.revisits, b.revisits):
        np.testing.assert_array_equal(ra.raster.pixels, rb.raster.pixels)
        np.testing.assert_array_equal(ra.cloud_mask, rb.cloud_mask)
        assert ra.acquired_at == rb.acquired_at
    assert a.truth == b.truth


def test_generator_records_shift_recoverable_by_phase_correlation():
    base = dict(blur_sigma=1.0, noise_sigma=0.0)
    shifted = generate_synthetic_scene(5, 1, 1, (128, 128), 2, DegradationSpec(shifts=((1.0, -0.5),), **base))
    still = generate_synthetic_scene(5, 1, 1, (128, 128), 2, DegradationSpec(shifts=((0.0, 0.0),), **base))
    assert shifted.truth["shifts"] == [[1.0, -0.5]]
    a = still.revisits[0].raster.pixels[0][8:-8, 8:-8]
    b = shifted.revisits[0].raster.pixels[0][8:-8, 8:-8]
    # displacement that registers b onto a, in LR pixels (dy, dx)
    (dy, dx), _, _ = phase_cross_correlation(a, b, upsample_factor=40)
    s = shifted.sr_factor
    assert abs(-dx * s - 1.0) <= 0.25
    assert abs(-dy * s - (-0.5)) <= 0.25


@pytest.mark.parametrize("seed", range(5))
def test_downsample_preserves_mean(seed):
    gain, offset = (1.2, 0.9, 1.05), (0.02, -0.01, 0.0)
    sigma_n = 0.01
    deg = DegradationSpec(shift_range=0.0, blur_sigma=1.0, noise_sigma=sigma_n, color_gain=gain, color_offset=offset)
    scene = generate_synthetic_scene(seed, 1, 3, (64, 64), 2, deg)
    hr = scene.hr_reference.pixels.astype(float)
    colored = np.asarray(gain)[:, None, None] * hr + np.asarray(offset)[:, None, None]
    lr = scene.revisits[0].raster.pixels
    assert np.all(np.abs(lr.mean(axis=(1, 2)) - colored.mean(axis=(1, 2))) <= 3 * sigma_n)


def test_area_downsample_block_means():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    np.testing.assert_allclose(area_downsample(x, 2)[0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        area_downsample(np.zeros((1, 5, 4)), 2)


def test_generator_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, 0, 1, (16, 16), 2)
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, 1, 1, (15, 16), 2)
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, 1, 1, (16, 16), 4)


def test_cloudy_revisits_have_masks_and_truth():
    deg = DegradationSpec(cloud_probability=1.0, cloud_max_fraction=0.5)
    scene = generate_synthetic_scene(2, 5, 1, (40, 40), 2, deg)
    fr = [r.cloud_fraction for r in scene.revisits]
    assert all(0 < f < 0.6 for f in fr)
    assert scene.truth["cloud_fractions"] == fr
