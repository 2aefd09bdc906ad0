import numpy as np
import pytest

from localdeblur import guided, synth
from localdeblur.guided import GuidedFilterConfig, masked_guided_filter, standard_guided_filter


def naive_window_fit(b, r, m, radius, eps):
    """Independent oracle: explicit least squares per window, naive loops."""
    h, w = b.shape
    a_map = np.zeros((h, w)); b_map = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            mm = m[y0:y1, x0:x1].ravel().astype(np.float64)
            rr = r[y0:y1, x0:x1].ravel().astype(np.float64)
            bb = b[y0:y1, x0:x1].ravel().astype(np.float64)
            if mm.sum() == 0:
                continue
            A = np.array([
                [np.sum(mm * rr * rr) + eps, np.sum(mm * rr)],
                [np.sum(mm * rr), np.sum(mm)],
            ])
            rhs = np.array([np.sum(mm * rr * bb), np.sum(mm * bb)])
            a_map[y, x], b_map[y, x] = np.linalg.solve(A, rhs)
    return a_map, b_map


def test_exact_affine_window():
    # full window [0,1,2] -> [1,3,5] is exactly B = 2R + 1
    b = np.array([[1.0, 3.0, 5.0]])
    r = np.array([[0.0, 1.0, 2.0]])
    m = np.ones((1, 3))
    a, bb, n = guided._solve_channel(b, r, m, radius=1, eps=0.0)
    assert a[0, 1] == pytest.approx(2.0, abs=1e-9)
    assert bb[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_masked_outlier_ignored():
    b = np.array([[1.0, 3.0, 99.0]])
    r = np.array([[0.0, 1.0, 5.0]])
    m = np.array([[1.0, 1.0, 0.0]])
    a, bb, n = guided._solve_channel(b, r, m, radius=1, eps=0.0)
    assert a[0, 1] == pytest.approx(2.0, abs=1e-9)
    assert bb[0, 1] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("eps", [1e-4, 1e-1])
def test_coeffs_match_bruteforce_oracle(eps):
    rng = np.random.default_rng(0)
    for seed in range(4):
        rng = np.random.default_rng(seed)
        b = rng.random((12, 12))
        r = rng.random((12, 12))
        m = (rng.random((12, 12)) > 0.4).astype(np.float64)
        a, bb, _ = guided._solve_channel(b, r, m, radius=2, eps=eps)
        a_ref, b_ref = naive_window_fit(b, r, m, 2, eps)
        assert np.max(np.abs(a - a_ref)) < 1e-6
        assert np.max(np.abs(bb - b_ref)) < 1e-6


def test_printed_fixed_point_identities():
    # solved (a, b) must satisfy both mutually-recursive closed forms
    rng = np.random.default_rng(1)
    eps = 1e-4
    radius = 2
    b = rng.random((16, 16))
    r = rng.random((16, 16))
    m = (rng.random((16, 16)) > 0.3).astype(np.float64)
    from localdeblur.imageops import box_sum
    a, bb, n = guided._solve_channel(b, r, m, radius, eps)
    s_r = box_sum(m * r, radius)
    s_b = box_sum(m * b, radius)
    s_rr = box_sum(m * r * r, radius)
    s_rb = box_sum(m * r * b, radius)
    ok = n > 0
    a_fp = (s_rb[ok] - bb[ok] * s_r[ok]) / (s_rr[ok] + eps)
    b_fp = (s_b[ok] - a[ok] * s_r[ok]) / n[ok]
    assert np.max(np.abs(a[ok] - a_fp)) < 1e-6
    assert np.max(np.abs(bb[ok] - b_fp)) < 1e-6


def test_zero_mask_passthrough_bit_exact():
    rng = np.random.default_rng(2)
    b = rng.random((24, 24, 3)).astype(np.float32)
    r = rng.random((24, 24, 3)).astype(np.float32)
    m = np.zeros((24, 24), dtype=np.float32)
    h = masked_guided_filter(b, r, m, GuidedFilterConfig(radius=3, eps=1e-4))
    assert np.array_equal(h, b)


def test_partial_mask_passthrough_outside():
    rng = np.random.default_rng(3)
    b = rng.random((24, 24, 3)).astype(np.float32)
    r = rng.random((24, 24, 3)).astype(np.float32)
    m = np.zeros((24, 24), dtype=np.float32)
    m[6:18, 6:18] = 1
    h = masked_guided_filter(b, r, m, GuidedFilterConfig(radius=2, eps=1e-4))
    outside = m == 0
    assert np.array_equal(h[outside], b[outside])


def test_self_guidance_identity():
    rng = np.random.default_rng(4)
    b = rng.random((20, 20)).astype(np.float32)
    m = np.ones((20, 20), dtype=np.float32)
    h = masked_guided_filter(b, b, m, GuidedFilterConfig(radius=2, eps=1e-8))
    assert np.max(np.abs(h.astype(np.float64) - b)) < 1e-4


def test_affine_exactness_on_mask():
    rng = np.random.default_rng(5)
    r = rng.random((20, 20)).astype(np.float64)
    b = 0.7 * r + 0.1
    m = np.zeros((20, 20), dtype=np.float64)
    m[4:16, 4:16] = 1
    h = masked_guided_filter(b, r, m, GuidedFilterConfig(radius=3, eps=1e-12))
    inside = m > 0
    assert np.max(np.abs(h[inside] - b[inside])) < 1e-5


def test_full_mask_equals_standard_filter():
    rng = np.random.default_rng(6)
    for seed in range(3):
        rng = np.random.default_rng(seed + 10)
        b = rng.random((24, 24, 3)).astype(np.float32)
        r = rng.random((24, 24, 3)).astype(np.float32)
        m = np.ones((24, 24), dtype=np.float32)
        cfg = GuidedFilterConfig(radius=3, eps=1e-3)
        h1 = masked_guided_filter(b, r, m, cfg).astype(np.float64)
        h2 = standard_guided_filter(b, r, cfg).astype(np.float64)
        assert np.max(np.abs(h1 - h2)) < 1e-5


def test_standard_filter_constant_input():
    rng = np.random.default_rng(7)
    b = np.full((16, 16), 0.42, dtype=np.float32)
    r = rng.random((16, 16)).astype(np.float32)
    h = standard_guided_filter(b, r, GuidedFilterConfig(radius=2, eps=1e-4))
    assert np.max(np.abs(h.astype(np.float64) - 0.42)) < 1e-5


def test_standard_filter_self_guidance_small_eps():
    rng = np.random.default_rng(8)
    b = rng.random((16, 16)).astype(np.float32)
    h = standard_guided_filter(b, b, GuidedFilterConfig(radius=2, eps=1e-10))
    assert np.max(np.abs(h.astype(np.float64) - b)) < 1e-4


def test_monotone_regularization():
    rng = np.random.default_rng(9)
    b = rng.random((32, 32)).astype(np.float32)
    r = rng.random((32, 32)).astype(np.float32)
    m = np.ones((32, 32), dtype=np.float32)
    coeffs = guided.solve_window_coeffs(b, r, m, GuidedFilterConfig(radius=2, eps=1e6))
    assert np.max(np.abs(coeffs[0].a_mean)) < 1e-3


def test_empty_window_coeffs_are_zero():
    b = np.random.default_rng(10).random((20, 20)).astype(np.float32)
    r = np.random.default_rng(11).random((20, 20)).astype(np.float32)
    m = np.zeros((20, 20), dtype=np.float32)
    m[0:3, 0:3] = 1
    wc = guided.solve_window_coeffs(b, r, m, GuidedFilterConfig(radius=1, eps=1e-4))[0]
    far = wc.masked_count == 0
    assert np.all(wc.a[far] == 0) and np.all(wc.b[far] == 0)


def test_shape_and_mask_validation():
    cfg = GuidedFilterConfig()
    with pytest.raises(guided.FilterError):
        masked_guided_filter(np.zeros((8, 8)), np.zeros((9, 9)), np.zeros((8, 8)), cfg)
    with pytest.raises(guided.FilterError):
        masked_guided_filter(np.zeros((8, 8)), np.zeros((8, 8)), np.full((8, 8), 0.5), cfg)
    with pytest.raises(guided.FilterError):
        GuidedFilterConfig(radius=0)
    with pytest.raises(guided.FilterError):
        GuidedFilterConfig(eps=0.0)


def test_restoration_improves_masked_region():
    # end-to-end: filtered output closer to sharp than the blurry input
    scene = synth.render_scene(synth.SceneSpec(seed=42))
    b, r, sharp, m = scene["blurred"], scene["short"], scene["sharp"], scene["mask"]
    h = masked_guided_filter(b, r, m, GuidedFilterConfig(radius=2, eps=1e-4))
    inside = m > 0
    mse_b = np.mean((b[inside] - sharp[inside]) ** 2)
    mse_h = np.mean((h[inside] - sharp[inside]) ** 2)
    assert mse_h < mse_b
