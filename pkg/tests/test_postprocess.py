import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import lognorm

from itdgp.postprocess import PostConfig, build_kernel, postprocess, smooth, threshold


def test_kernel_normalized_and_radial():
    k = build_kernel()
    w = k.weights
    assert w.shape == (7, 7)
    assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0)
    np.testing.assert_allclose(w, w.T, atol=0)
    np.testing.assert_allclose(w, w[::-1], atol=0)
    np.testing.assert_allclose(w, w[:, ::-1], atol=0)
    assert w[3, 3] == pytest.approx(w[3, 4])  # centre takes the largest neighbour weight


def test_kernel_matches_direct_pdf_table():
    k = build_kernel(0.0, 0.2, 3)
    ax = np.arange(-3, 4)
    d = np.hypot(ax[:, None], ax[None, :])
    raw = np.where(d > 0, lognorm.pdf(np.where(d > 0, d, 1.0), s=0.2), 0.0)
    raw[3, 3] = raw.max()
    np.testing.assert_allclose(k.weights, raw / raw.sum(), atol=1e-14)
    ring = (d > 0.5) & (d < 1.5)
    assert k.weights[ring].sum() + k.weights[3, 3] > 0.99  # narrow sigma: mass at the d = 1 ring


def test_centre_zero_rule_and_bad_params():
    assert build_kernel(center="zero").weights[3, 3] == 0
    for kw in ({"sigma": 0}, {"radius": 0}, {"center": "mean"}):
        with pytest.raises(ValueError):
            build_kernel(**kw)


def test_constant_map_interior_unchanged():
    mask = np.ones((16, 16, 2), bool)
    out = smooth(np.full(mask.shape, 0.7), mask, build_kernel())
    np.testing.assert_allclose(out, 0.7, atol=1e-10)


def test_impulse_response():
    k = build_kernel()
    mask = np.ones((15, 15, 1), bool)
    m = np.zeros(mask.shape)
    m[7, 7, 0] = 1.0
    out = smooth(m, mask, k)[:, :, 0]
    np.testing.assert_allclose(out[4:11, 4:11], k.weights[::-1, ::-1], atol=1e-15)
    assert out.max() <= k.weights.max() + 1e-15


def test_isolated_voxel_removed():
    mask = np.ones((15, 15, 2), bool)
    m = np.zeros(mask.shape)
    m[7, 7, 1] = 1.0
    assert postprocess(m, mask).sum() == 0
    assert postprocess(m, mask, PostConfig(smooth_binary=True)).sum() == 0


def test_out_of_mask_zeroed():
    mask = np.zeros((10, 10, 1), bool)
    mask[2:8, 2:8] = True
    out = smooth(np.ones(mask.shape), mask, build_kernel())
    assert np.all(out[~mask] == 0) and np.all(out[mask] > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_smoothing_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    mask = np.ones((12, 12, 2), bool)
    Y1, Y2 = rng.random(mask.shape) * 0.1, rng.random(mask.shape) * 0.1
    k = build_kernel()
    # clamping to [0, 1] is the only nonlinearity; keep the combination inside it
    lhs = smooth(0.5 + a * 0.1 * Y1 + b * 0.1 * Y2, mask, k)
    rhs = 0.5 + a * 0.1 * smooth(Y1, mask, k) + b * 0.1 * smooth(Y2, mask, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_mass_preserved_for_interior_support():
    rng = np.random.default_rng(5)
    mask = np.ones((20, 20, 1), bool)
    m = np.zeros(mask.shape)
    m[7:13, 7:13, 0] = rng.random((6, 6))
    assert smooth(m, mask, build_kernel()).sum() == pytest.approx(m.sum(), abs=1e-10)


def test_threshold_convention():
    np.testing.assert_array_equal(threshold(np.array([0.49, 0.5, 0.51])), [0, 1, 1])
    assert threshold(np.zeros((3, 3))).sum() == 0
    v = np.random.default_rng(6).random(100)
    assert np.all(threshold(v, 0.7) <= threshold(v, 0.3))
    with pytest.raises(ValueError):
        threshold(v, 1.0)


def test_disabled_postprocess_is_plain_threshold():
    rng = np.random.default_rng(7)
    mask = rng.random((8, 8, 2)) > 0.3
    p = rng.random(mask.shape)
    np.testing.assert_array_equal(postprocess(p, mask, PostConfig(enabled=False)), (p >= 0.5) & mask)


def _disc_mask(n=20, r=7):
    ax = np.arange(n) - n / 2 + 0.5
    return (np.hypot(ax[:, None], ax[None, :]) <= r)[:, :, None]


def test_normalized_keeps_constant_up_to_mask_edge():
    mask = _disc_mask()
    k = build_kernel()
    norm = smooth(np.full(mask.shape, 0.7), mask, k)
    plain = smooth(np.full(mask.shape, 0.7), mask, k, normalized=False)
    np.testing.assert_allclose(norm[mask], 0.7, atol=1e-10)
    assert plain[mask].min() < 0.6
    interior = np.zeros_like(mask)
    interior[8:12, 8:12] = True
    np.testing.assert_allclose(plain[interior], norm[interior], atol=1e-12)


def test_normalized_is_linear_under_partial_mask():
    rng = np.random.default_rng(8)
    mask = _disc_mask()
    Y1, Y2 = rng.random(mask.shape) * 0.3, rng.random(mask.shape) * 0.3
    k = build_kernel()
    lhs = smooth(0.2 + 0.5 * Y1 + 0.4 * Y2, mask, k)
    rhs = 0.2 * smooth(np.ones(mask.shape), mask, k) + 0.5 * smooth(Y1, mask, k) + 0.4 * smooth(Y2, mask, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_small_margin_edge_lesion_survives():
    # lesion touching the mask edge with probabilities barely above 0.5
    mask = _disc_mask()
    lesion = np.zeros_like(mask)
    lesion[3:9, 6:14] = True
    lesion &= mask
    p = np.where(lesion, 0.505, 0.495)

    def dsc(cfg):
        kept = postprocess(p, mask, cfg).astype(bool)
        return 2 * (kept & lesion).sum() / (kept.sum() + lesion.sum())

    assert dsc(PostConfig()) > 0.8
    assert dsc(PostConfig(normalized=False)) < 0.5
