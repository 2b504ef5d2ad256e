import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixelwarden.dataset_io import LabeledDataset, generate_synthetic
from pixelwarden.defense import (
    DEFAULT_THRESHOLD, Defense, apply_augmentation, apply_defense_to_split, augment,
    augment_dataset, average_pool_probe, coordinate_consistency, detect_stationary_backdoor,
    gaussian_kernel, gaussian_smooth, median_filter, quantize,
)
from pixelwarden.tamper import BLUE, PoisonPlan, TamperSpec, make_plan, poison_dataset


def naive_median(img, window):
    """Per-window sort with explicit index clamping."""
    h, w, ch = img.shape
    r = window // 2
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                vals = sorted(int(img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1), c])
                              for dy in range(-r, r + 1) for dx in range(-r, r + 1))
                out[y, x, c] = vals[len(vals) // 2]
    return out


def naive_gaussian(img, sigma):
    """Direct 2-D convolution with an outer-product kernel and clamped indices."""
    rad = math.ceil(3 * sigma)
    k1 = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-rad, rad + 1)]
    s = sum(k1)
    k1 = [v / s for v in k1]
    h, w, ch = img.shape
    out = np.empty(img.shape)
    for y in range(h):
        for x in range(w):
            for c in range(ch):
                acc = 0.0
                for i in range(-rad, rad + 1):
                    for j in range(-rad, rad + 1):
                        acc += k1[i + rad] * k1[j + rad] * img[min(max(y + i, 0), h - 1),
                                                               min(max(x + j, 0), w - 1), c]
                out[y, x, c] = acc
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def test_filters_keep_constant_image():
    img = np.full((9, 7, 3), 123, np.uint8)
    assert np.array_equal(median_filter(img, 3), img)
    assert np.array_equal(median_filter(img, 5), img)
    assert np.array_equal(gaussian_smooth(img, 1.3), img)
    assert np.array_equal(quantize(np.full((4, 4, 3), 128, np.uint8), 16), np.full((4, 4, 3), 128, np.uint8))


def test_median_restores_zeroed_blue_pixel():
    img = np.full((8, 8, 3), 200, np.uint8)
    bad = img.copy()
    bad[3, 4, BLUE] = 0
    assert np.array_equal(median_filter(bad, 3), img)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), window=st.sampled_from([3, 5]),
       seed=st.integers(0, 2**32))
def test_median_matches_naive_oracle(h, w, window, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    assert np.array_equal(median_filter(img, window), naive_median(img, window))


def test_median_stack_equals_per_image():
    imgs = np.random.default_rng(0).integers(0, 256, (4, 6, 6, 3), dtype=np.uint8)
    stacked = median_filter(imgs, 3)
    for i in range(4):
        assert np.array_equal(stacked[i], median_filter(imgs[i], 3))


def test_median_idempotent_on_constant_regions():
    img = np.zeros((10, 10, 3), np.uint8)
    img[:, 5:] = 180
    once = median_filter(img, 3)
    assert np.array_equal(median_filter(once, 3), once)


@pytest.mark.parametrize("bad", [2, 4, 1, 0])
def test_median_rejects_bad_window(bad):
    with pytest.raises(ValueError):
        median_filter(np.zeros((4, 4, 3), np.uint8), bad)


@pytest.mark.parametrize("sigma", [0.3, 0.8, 1.0, 2.5])
def test_gaussian_kernel_normalised(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1.0) < 1e-9
    assert len(k) == 2 * math.ceil(3 * sigma) + 1
    assert np.allclose(k, k[::-1])


@pytest.mark.parametrize("sigma", [0.7, 1.0, 1.6])
def test_gaussian_impulse_matches_direct_convolution(sigma):
    img = np.zeros((13, 13, 3), np.uint8)
    img[6, 6, :] = 255
    img[0, 12, 1] = 90  # impulse in the corner exercises edge replication
    assert np.array_equal(gaussian_smooth(img, sigma), naive_gaussian(img, sigma))


def test_gaussian_random_matches_direct_convolution():
    img = np.random.default_rng(3).integers(0, 256, (7, 9, 3), dtype=np.uint8)
    assert np.array_equal(gaussian_smooth(img, 0.9), naive_gaussian(img, 0.9))


@pytest.mark.parametrize("sigma", [0, -1.0])
def test_gaussian_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ValueError):
        gaussian_smooth(np.zeros((4, 4, 3), np.uint8), sigma)


def test_filters_preserve_shape_and_range():
    img = np.random.default_rng(1).integers(0, 256, (12, 6, 3), dtype=np.uint8)
    for out in (median_filter(img, 3), gaussian_smooth(img, 2.0), quantize(img, 32),
                average_pool_probe(img, 2)):
        assert out.shape == img.shape and out.dtype == np.uint8


def test_quantize_multiples():
    img = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    q = quantize(img, 16)
    assert len(np.unique(q)) <= 17
    assert np.abs(q.astype(int) - img).max() <= 8


def test_augment_deterministic():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert np.array_equal(augment(img, 42), augment(img, 42))


def test_augment_identity_without_flip_or_shift():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert np.array_equal(apply_augmentation(img, False, 0, 0), img)
    # find a seed whose draw is identity and check augment agrees
    seen_identity = False
    for s in range(500):
        out = augment(img, s)
        if np.array_equal(out, img):
            seen_identity = True
            break
    assert seen_identity


def test_augment_translation_edge_replication():
    img = np.arange(16, dtype=np.uint8).reshape(4, 4, 1).repeat(3, axis=2)
    out = apply_augmentation(img, False, 1, 0)
    assert np.array_equal(out[1:], img[:-1])
    assert np.array_equal(out[0], img[0])
    flipped = apply_augmentation(img, True, 0, 0)
    assert np.array_equal(flipped, img[:, ::-1])


def test_augmentation_breaks_tamper_consistency():
    ds = generate_synthetic(1, 1000, 32, 32, seed=0)
    spec = TamperSpec(10, 20)
    imgs = ds.images.copy()
    imgs[:, 10, 20, BLUE] = 0
    share, value = coordinate_consistency(imgs)
    assert share[10, 20, BLUE] == 1.0
    aug = augment_dataset(ds.replace(images=imgs), seed=7)
    share, _ = coordinate_consistency(aug.images)
    assert share[spec.row, spec.col, BLUE] < 0.6


def test_detector_ranks_planted_coordinate_first():
    ds = generate_synthetic(5, 40, 16, 16, seed=2)
    for seed in range(5):
        plan = make_plan(3, 1, 16, 16, seed=seed)
        bad = poison_dataset(ds, plan)
        top = detect_stationary_backdoor(bad)[0]
        assert (top.class_index, top.row, top.col, top.channel) == (3, plan.spec.row, plan.spec.col, BLUE)
        assert top.consistency == 1.0 and top.value == 0 and top.flagged


def clean_fixture(seed):
    return generate_synthetic(10, 100, 32, 32, seed=seed)


def test_detector_clean_fixture_calibration():
    """Empirical maximum consistency over 20 clean fixtures sits well under the threshold."""
    worst = 0.0
    for seed in range(20):
        findings = detect_stationary_backdoor(clean_fixture(seed), top=5)
        worst = max(worst, findings[0].consistency)
        assert not any(f.flagged for f in findings)
    assert worst < DEFAULT_THRESHOLD / 2


def test_detector_half_poisoned_counting_oracle():
    ds = generate_synthetic(2, 200, 8, 8, seed=4)
    r, c = 2, 5
    imgs = ds.images.copy()
    a_idx = np.flatnonzero(ds.labels == 0)
    imgs[a_idx[:100], r, c, BLUE] = 0
    bad = ds.replace(images=imgs)
    natural = int((ds.images[a_idx[100:], r, c, BLUE] == 0).sum())
    hit = [f for f in detect_stationary_backdoor(bad, threshold=0.9)
           if (f.class_index, f.row, f.col, f.channel) == (0, r, c, BLUE)][0]
    assert hit.consistency == pytest.approx((100 + natural) / 200)
    assert not hit.flagged


def test_detector_threshold_zero_flags_everything():
    ds = generate_synthetic(2, 5, 4, 4, seed=0)
    findings = detect_stationary_backdoor(ds, threshold=0.0)
    assert len(findings) == 2 * 4 * 4 * 3
    assert all(f.flagged for f in findings)


def test_detector_errors():
    ds = generate_synthetic(2, 5, 4, 4, seed=0)
    with pytest.raises(ValueError):
        detect_stationary_backdoor(ds, threshold=1.5)
    lonely = LabeledDataset(ds.images[:5], ds.labels[:5], ds.class_names)
    with pytest.raises(ValueError, match="no images"):
        detect_stationary_backdoor(lonely)


def test_median_split_restores_by_neighbourhood_oracle():
    rng = np.random.default_rng(5)
    imgs = rng.integers(0, 4, (60, 8, 8, 3), dtype=np.uint8) * 60  # few levels, frequent ties
    ds = LabeledDataset(imgs, np.arange(60) % 3, ("a", "b", "c"), split="test")
    plan = PoisonPlan(0, 1, TamperSpec(4, 4))
    bad = poison_dataset(ds, plan)
    out = apply_defense_to_split(bad, Defense("median", 3))
    for i in np.flatnonzero(ds.labels == 1):
        block = bad.images[i, 3:6, 3:6, BLUE].ravel()
        vals, cnt = np.unique(block, return_counts=True)
        if cnt.max() >= 5:
            assert out.images[i, 4, 4, BLUE] == vals[cnt.argmax()]


def test_defense_keeps_labels_and_counts():
    ds = generate_synthetic(3, 10, 8, 8, seed=1)
    for name in ("median:3", "smooth:1.0", "quantize:16", "avgpool:2", "none"):
        out = apply_defense_to_split(ds, name)
        assert np.array_equal(out.labels, ds.labels)
        assert (out.class_counts() == ds.class_counts()).all()
    assert apply_defense_to_split(ds, "none").same_as(ds)


def test_defense_parse():
    assert Defense.parse("median") == Defense("median", 3)
    assert Defense.parse("smooth:0.5").param == 0.5
    with pytest.raises(ValueError):
        Defense.parse("jpeg")
    with pytest.raises(ValueError):
        Defense.parse("median:4")
