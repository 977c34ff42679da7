import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcm3.augment import (IntraParams, MaskSpec, apply_mask, crop_resize, cutmix, intra_transform,
                          make_mask, mixup, random_mix, resize_time, resizemix, shear, shear_matrix)
from pcm3.data import BodyPartition, default_partition
from pcm3.errors import ConfigError, ShapeError

T_, J_ = 16, 15
PART = default_partition(J_)


def seq(seed=0, t=T_, j=J_):
    return np.random.default_rng(seed).normal(size=(t, j, 3))


def rng(seed=0):
    return np.random.default_rng(seed)


# -- intra transforms -----------------------------------------------------------------


def test_identity_parameters_return_input():
    s = seq()
    p = IntraParams(crop_min=1.0, crop_max=1.0, shear=0.0, jitter_prob=0.0)
    np.testing.assert_array_equal(intra_transform(s, p, rng()), s)


def test_shear_applies_one_matrix_to_every_frame():
    s = seq(1)
    f = rng(2).uniform(-0.5, 0.5, 6)
    out = shear(s, f)
    assert out.shape == s.shape
    m = shear_matrix(f)
    np.testing.assert_array_equal(np.diag(m), np.ones(3))
    for t in range(T_):
        np.testing.assert_allclose(out[t], s[t] @ m.T, atol=1e-14)


def test_crop_half_then_resize_matches_interpolation_on_ramp():
    ramp = np.arange(T_, dtype=float)[:, None, None] * np.ones((1, J_, 3))
    out = crop_resize(ramp, 0.5, start=0)
    half = T_ // 2
    expected = np.arange(T_) * (half - 1) / (T_ - 1)
    np.testing.assert_allclose(out[:, 0, 0], expected, atol=1e-12)


def test_resize_keeps_endpoints():
    s = seq(3)
    out = resize_time(s[:5], T_)
    np.testing.assert_array_equal(out[0], s[0])
    np.testing.assert_allclose(out[-1], s[4], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_intra_transform_shape_and_purity(seed):
    s = seq(seed % 7)
    a = intra_transform(s, IntraParams(), rng(seed))
    b = intra_transform(s, IntraParams(), rng(seed))
    assert a.shape == s.shape
    np.testing.assert_array_equal(a, b)


# -- mixes ------------------------------------------------------------------------------


def test_mixup_endpoints_and_midpoint():
    s1, s2 = seq(0), seq(1)
    np.testing.assert_array_equal(mixup(s1, s2, 0.0).mixed, s1)
    np.testing.assert_array_equal(mixup(s1, s2, 1.0).mixed, s2)
    mid = mixup(np.zeros((T_, J_, 3)), np.full((T_, J_, 3), 2.0), 0.5)
    np.testing.assert_array_equal(mid.mixed, np.ones((T_, J_, 3)))
    assert mid.lam == 0.5 and mid.kind == "mixup"


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0))
def test_mixup_symmetry(lam):
    s1, s2 = seq(0), seq(1)
    np.testing.assert_array_equal(mixup(s1, s2, lam).mixed, mixup(s2, s1, 1.0 - lam).mixed)


def test_mix_shape_mismatch():
    with pytest.raises(ShapeError):
        mixup(seq(), seq(t=8), 0.5)
    with pytest.raises(ShapeError):
        cutmix(seq(), seq(t=8), rng(), 0.5)


def test_cutmix_one_part_all_frames():
    r = cutmix(seq(0), seq(1), rng(0), 0.2, PART)
    assert r.lam == pytest.approx(3 / 15)


def test_cutmix_zero_target_is_identity():
    s1 = seq(0)
    r = cutmix(s1, seq(1), rng(0), 0.0)
    np.testing.assert_array_equal(r.mixed, s1)
    assert r.lam == 0.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000), st.booleans())
def test_cutmix_cells_and_lambda(target, seed, aligned):
    s1, s2 = seq(0), seq(1)
    r = cutmix(s1, s2, rng(seed), target, PART if aligned else None)
    from_s1 = np.all(r.mixed == s1, axis=-1)
    from_s2 = np.all(r.mixed == s2, axis=-1)
    assert np.all(from_s1 | from_s2)
    assert r.lam == pytest.approx(from_s2.mean())
    assert abs(r.lam - target) <= 0.1
    # Replaced region is one contiguous frame interval.
    frames = np.flatnonzero(from_s2.any(axis=1))
    if len(frames):
        assert frames[-1] - frames[0] + 1 == len(frames)


def test_resizemix_full_interval_is_s2():
    s2 = seq(1)
    r = resizemix(seq(0), s2, rng(0), 1.0)
    np.testing.assert_array_equal(r.mixed, s2)
    assert r.lam == 1.0


def test_resizemix_constant_s2():
    s2 = np.broadcast_to(seq(1)[:1], (T_, J_, 3)).copy()
    s1 = seq(0)
    r = resizemix(s1, s2, rng(3), 0.5)
    replaced = ~np.all(r.mixed == s1, axis=(1, 2))
    assert replaced.sum() == 8
    np.testing.assert_allclose(r.mixed[replaced], np.broadcast_to(s2[0], (8, J_, 3)), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_resizemix_lambda_is_interval_fraction(target, seed):
    s1 = seq(0)
    r = resizemix(s1, seq(1) + 10.0, rng(seed), target)
    replaced = ~np.all(r.mixed == s1, axis=(1, 2))
    assert r.lam == pytest.approx(replaced.sum() / T_)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_random_mix_lambda_ranges(seed):
    r = random_mix(seq(0), seq(1), rng(seed), PART)
    assert r.mixed.shape == (T_, J_, 3)
    assert 0.0 <= r.lam <= 1.0
    if r.kind != "mixup":
        assert 0.1 <= r.lam <= 0.9


# -- masking ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_topology_mask_part_aligned_exact_ratio(seed, clips):
    spec = make_mask(T_, J_, PART, 0.6, clips, "topology", rng(seed))
    assert spec.ratio == pytest.approx(0.6, abs=1e-12)
    assert spec.masked_count == round(0.6 * T_ * J_)
    bounds = [c * (T_ // clips) for c in range(clips)] + [T_]
    for c in range(clips):
        block = spec.visible[bounds[c]:bounds[c + 1]]
        masked_parts = 0
        for joints in PART.joint_sets():
            cells = block[:, list(joints)]
            assert np.all(cells == cells.flat[0])
            masked_parts += int(cells.flat[0] == 0)
        assert masked_parts == 3


def test_mask_ratio_zero_all_visible():
    spec = make_mask(T_, J_, PART, 0.0, 4, "topology", rng())
    np.testing.assert_array_equal(spec.visible, np.ones((T_, J_)))


def test_random_mask_exact_count():
    for seed in range(20):
        spec = make_mask(T_, J_, PART, 0.6, 4, "random", rng(seed))
        assert int((spec.visible == 0).sum()) == 144


def test_topology_mask_invalid_ratio():
    with pytest.raises(ConfigError):
        make_mask(T_, J_, PART, 0.5, 4, "topology", rng())
    with pytest.raises(ConfigError):
        make_mask(T_, J_, PART, 0.6, 4, "bogus", rng())


def test_topology_mask_unequal_parts_rejected():
    uneven = BodyPartition((("a", (0,)), ("b", (1, 2))))
    with pytest.raises(ConfigError):
        make_mask(T_, 3, uneven, 0.5, 2, "topology", rng())


def test_apply_mask():
    s = seq()
    full = MaskSpec(np.ones((T_, J_)), 0.0, 1, "random")
    np.testing.assert_array_equal(apply_mask(s, full), s)
    none = MaskSpec(np.zeros((T_, J_)), 1.0, 1, "random")
    np.testing.assert_array_equal(apply_mask(s, none), np.zeros_like(s))
    spec = make_mask(T_, J_, PART, 0.6, 4, "topology", rng(5))
    out = apply_mask(s, spec)
    zero_cells = np.all(out == 0, axis=-1)
    assert zero_cells.sum() == round(spec.ratio * T_ * J_)
    np.testing.assert_array_equal(out[spec.visible == 1], s[spec.visible == 1])


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(seq(), MaskSpec(np.ones((T_, 14)), 0.0, 1, "random"))
