import numpy as np
import pytest

from localdeblur import imageops, synth


# -- motion kernels ---------------------------------------------------------

def test_kernel_length_one_is_identity():
    for angle in [0.0, 0.7, 2.0]:
        k = synth.make_motion_kernel(1, angle)
        assert k.taps.shape == (1, 1)
        assert k.taps[0, 0] == pytest.approx(1.0)


def test_kernel_horizontal_uniform():
    k = synth.make_motion_kernel(5, 0.0)
    row = k.taps[k.radius]
    assert np.allclose(row, 0.2, atol=1e-9)
    assert np.allclose(np.delete(k.taps, k.radius, axis=0), 0.0)


def test_kernel_normalized():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = synth.make_motion_kernel(rng.uniform(1, 20), rng.uniform(0, np.pi))
        assert k.taps.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(k.taps >= 0)


def test_kernel_length_below_one_rejected():
    with pytest.raises(synth.SynthError):
        synth.make_motion_kernel(0.5, 0.0)


# -- compositing ------------------------------------------------------------

def test_identity_kernel_preserves_image():
    rng = np.random.default_rng(1)
    sharp = rng.random((32, 32, 3)).astype(np.float32)
    mask = np.zeros((32, 32), dtype=np.float32)
    mask[10:20, 10:20] = 1
    k = synth.make_motion_kernel(1, 0.0)
    b, m_gt = synth.composite_local_blur(sharp, mask, k, background=sharp * (1 - mask[:, :, None]))
    assert np.array_equal(b, sharp)
    assert np.array_equal(m_gt, synth.dilate_square(mask, 1))


def test_impulse_object_spreads_to_line():
    sharp = np.zeros((15, 15), dtype=np.float32)
    sharp[7, 7] = 1.0
    mask = np.zeros_like(sharp)
    mask[7, 7] = 1
    k = synth.make_motion_kernel(5, 0.0)
    b, _ = synth.composite_local_blur(sharp, mask, k)
    assert np.allclose(b[7, 5:10], 0.2, atol=1e-6)
    assert b.sum() == pytest.approx(1.0, abs=1e-6)


def test_changes_confined_to_mask():
    rng = np.random.default_rng(2)
    for seed in range(5):
        scene = synth.render_scene(synth.SceneSpec(seed=seed))
        changed = np.any(scene["blurred"] != scene["sharp"], axis=2)
        assert not np.any(changed & (scene["mask"] == 0))


def test_constant_image_stays_constant():
    sharp = np.full((24, 24, 3), 0.6, dtype=np.float32)
    mask = np.zeros((24, 24), dtype=np.float32)
    mask[6:18, 6:18] = 1
    k = synth.make_motion_kernel(7, 0.3)
    b, m_gt = synth.composite_local_blur(sharp, mask, k, background=sharp)
    assert np.allclose(b, 0.6, atol=1e-6)


def test_size_mismatch_rejected():
    k = synth.make_motion_kernel(3, 0.0)
    with pytest.raises(synth.SynthError):
        synth.composite_local_blur(np.zeros((8, 8, 3)), np.zeros((4, 4)), k)


# -- short exposure ---------------------------------------------------------

def test_short_exposure_noop():
    rng = np.random.default_rng(3)
    sharp = rng.random((16, 16, 3)).astype(np.float32)
    r = synth.simulate_short_exposure(sharp, s=1.0, sigma=0.0, seed=0)
    assert np.max(np.abs(r - sharp)) < 1e-6


def test_short_exposure_scales_gray():
    sharp = np.full((8, 8, 3), 0.8, dtype=np.float32)
    r = synth.simulate_short_exposure(sharp, s=0.5, sigma=0.0, seed=0)
    assert np.allclose(r, 0.4, atol=1e-6)


def test_short_exposure_noise_magnitude():
    # E|N(0, sigma)| = sigma * sqrt(2/pi) ~= 0.0399 at sigma=0.05
    sharp = np.full((128, 128, 3), 0.5, dtype=np.float32)
    r = synth.simulate_short_exposure(sharp, s=1.0, sigma=0.05, seed=7)
    mean_abs = np.mean(np.abs(r.astype(np.float64) - 0.5))
    assert 0.03 <= mean_abs <= 0.05


def test_short_exposure_invalid_scale():
    with pytest.raises(synth.SynthError):
        synth.simulate_short_exposure(np.zeros((4, 4, 3)), s=0.0, sigma=0.0, seed=0)


def test_short_exposure_deterministic():
    sharp = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
    a = synth.simulate_short_exposure(sharp, 0.55, 0.03, seed=5)
    b = synth.simulate_short_exposure(sharp, 0.55, 0.03, seed=5)
    assert np.array_equal(a, b)


# -- dataset ----------------------------------------------------------------

def test_empty_manifest(tmp_path):
    m = synth.generate_dataset([], tmp_path)
    assert m.records == []
    back = synth.DatasetManifest.load(tmp_path / "manifest.json")
    assert back.records == []


def test_dataset_reproducible(tmp_path):
    specs = synth.default_specs(3, 1, size=(48, 48), seed=11)
    m1 = synth.generate_dataset(specs, tmp_path / "a")
    m2 = synth.generate_dataset(specs, tmp_path / "b")
    assert m1.to_json() == m2.to_json()
    for r in m1.records:
        for key in ("blurred", "short", "sharp", "mask"):
            h1 = synth.file_sha256(tmp_path / "a" / getattr(r, key))
            h2 = synth.file_sha256(tmp_path / "b" / getattr(r, key))
            assert h1 == h2


def test_manifest_round_trip(tmp_path):
    specs = synth.default_specs(2, 1, size=(48, 48), seed=21)
    m = synth.generate_dataset(specs, tmp_path)
    back = synth.DatasetManifest.load(tmp_path / "manifest.json")
    assert back == m


def test_background_purity_after_png(tmp_path):
    # B equals sharp bit-exact outside the mask, surviving 8-bit round trip
    specs = synth.default_specs(2, 0, size=(64, 64), seed=31)
    m = synth.generate_dataset(specs, tmp_path)
    for r in m.records:
        b = imageops.load_png(tmp_path / r.blurred)
        sharp = imageops.load_png(tmp_path / r.sharp)
        mask = imageops.load_png(tmp_path / r.mask)
        outside = mask == 0
        assert np.array_equal(b[outside], sharp[outside])
