import math

import numpy as np
import pytest

from deskmark import imaging
from tests.conftest import synth_images


def _rand_img(seed, h=32, w=32):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float64)


# --- YUV ---------------------------------------------------------------------

def test_yuv_black_white_red():
    black = np.zeros((16, 16, 3))
    white = np.ones((16, 16, 3))
    red = np.zeros((16, 16, 3))
    red[..., 0] = 1.0
    assert np.allclose(imaging.rgb_to_yuv(black), 0.0)
    w = imaging.rgb_to_yuv(white)
    assert np.allclose(w[..., 0], 1.0)
    assert np.allclose(w[..., 1:], 0.0, atol=1e-12)
    assert np.allclose(imaging.rgb_to_yuv(red)[..., 0], 0.299)


def test_yuv_roundtrip():
    img = _rand_img(0)
    back = imaging.yuv_to_rgb(imaging.rgb_to_yuv(img))
    assert np.abs(back - img).max() < 1e-6


def test_yuv_y_in_unit_range():
    img = _rand_img(1)
    y = imaging.rgb_to_yuv(img)[..., 0]
    assert y.min() >= 0.0 and y.max() <= 1.0


# --- PSNR ----------------------------------------------------------------------

def psnr_oracle(a, b):
    # literal single-loop formula
    total, count = 0.0, 0
    fa, fb = a.reshape(-1), b.reshape(-1)
    for i in range(fa.size):
        d = float(fa[i]) - float(fb[i])
        total += d * d
        count += 1
    mse = total / count
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def test_psnr_identical_is_inf():
    img = _rand_img(2)
    assert imaging.psnr(img, img) == math.inf


def test_psnr_uniform_difference():
    a = np.full((16, 16, 3), 0.4)
    b = np.full((16, 16, 3), 0.5)
    assert imaging.psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_oracle():
    for seed in range(5):
        a, b = _rand_img(seed), _rand_img(seed + 100)
        assert imaging.psnr(a, b) == pytest.approx(psnr_oracle(a, b), rel=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        imaging.psnr(_rand_img(0, 16, 16), _rand_img(0, 16, 17))


def test_psnr_decreases_with_noise_amplitude():
    img = _rand_img(3)
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(img.shape)
    prev = math.inf
    for amp in (0.01, 0.02, 0.05, 0.1):
        cur = imaging.psnr(img, np.clip(img + amp * noise, 0, 1))
        assert cur < prev
        prev = cur


# --- SSIM ----------------------------------------------------------------------

def ssim_oracle(a, b):
    # brute-force per-window implementation of the stabilized formula
    y1 = imaging.luma(a.astype(np.float64))
    y2 = imaging.luma(b.astype(np.float64))
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    h, wd = y1.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            p1 = y1[i:i + size, j:j + size]
            p2 = y2[i:i + size, j:j + size]
            mu1 = (w * p1).sum()
            mu2 = (w * p2).sum()
            v1 = (w * p1 * p1).sum() - mu1 * mu1
            v2 = (w * p2 * p2).sum() - mu2 * mu2
            cov = (w * p1 * p2).sum() - mu1 * mu2
            vals.append(((2 * mu1 * mu2 + c1) * (2 * cov + c2))
                        / ((mu1**2 + mu2**2 + c1) * (v1 + v2 + c2)))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    img = _rand_img(4)
    assert imaging.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_contrast_reversal_scores_low():
    rng = np.random.default_rng(5)
    binary = (rng.random((32, 32, 3)) > 0.5).astype(np.float64)
    score = imaging.ssim(binary, 1.0 - binary)
    assert score < 0.0  # anticorrelated structure
    assert score < 1.0


def test_ssim_matches_bruteforce_oracle():
    for seed in range(3):
        a, b = _rand_img(seed + 10), _rand_img(seed + 20)
        assert imaging.ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_symmetry():
    a, b = _rand_img(6), _rand_img(7)
    assert imaging.ssim(a, b) == pytest.approx(imaging.ssim(b, a), abs=1e-12)


def test_ssim_too_small_image():
    with pytest.raises(ValueError):
        # 16x16 passes buffer validation but a 10-px strip cannot hold a window
        imaging.ssim(np.zeros((16, 10, 3)), np.zeros((16, 10, 3)))
    with pytest.raises(ValueError):
        imaging.ssim(_rand_img(0, 16, 16), _rand_img(0, 16, 17))


# --- resize ---------------------------------------------------------------------

def test_resize_identity_dims():
    img = _rand_img(8).astype(np.float32)
    out = imaging.resize(img, 32, 32)
    assert np.array_equal(out, img)


def test_resize_constant_image():
    img = np.full((20, 24, 3), 0.37, dtype=np.float32)
    for dims in ((40, 48), (10, 12), (33, 17)):
        out = imaging.resize(img, *dims)
        assert out.shape == (*dims, 3)
        assert np.allclose(out, 0.37, atol=1e-6)


def test_resize_upscale_preserves_linear_ramp():
    w = 16
    ramp = np.tile(np.linspace(0.1, 0.9, w, dtype=np.float32)[None, :, None], (w, 1, 3))
    up = imaging.resize(ramp, w, 2 * w)
    # interior pixels of a 2x bilinear upscale stay on the ramp
    xs = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    expected = 0.1 + (0.9 - 0.1) * xs / (w - 1)
    interior = slice(2, 2 * w - 2)
    assert np.allclose(up[5, interior, 0], expected[interior], atol=1e-5)


def test_resize_rejects_bad_dims():
    with pytest.raises(ValueError):
        imaging.resize(_rand_img(0), 0, 10)


def test_resize_output_in_range():
    img = _rand_img(9).astype(np.float32)
    out = imaging.resize(img, 13, 57)
    assert out.min() >= 0.0 and out.max() <= 1.0


# --- I/O --------------------------------------------------------------------------

def test_png_roundtrip(tmp_path):
    img = _rand_img(10).astype(np.float32)
    path = tmp_path / "x.png"
    imaging.save_image(img, path)
    back = imaging.load_image(path)
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-9


def test_load_non_image_fails(tmp_path):
    path = tmp_path / "not_an_image.png"
    path.write_bytes(b"definitely not a PNG")
    with pytest.raises(IOError):
        imaging.load_image(path)


def test_unsupported_format(tmp_path):
    with pytest.raises(ValueError):
        imaging.save_image(_rand_img(0), tmp_path / "x.tiff")


def test_jpeg_quality_roundtrip(tmp_path):
    img = synth_images(1, 64, seed=3)[0]
    path = tmp_path / "x.jpg"
    imaging.save_image(img, path, jpeg_quality=50)
    back = imaging.load_image(path)
    assert imaging.psnr(img, back) > 28.0  # sanity bound on a natural-ish image


def test_validate_image():
    with pytest.raises(ValueError):
        imaging.validate_image(np.zeros((8, 8, 3)))  # too small
    with pytest.raises(ValueError):
        imaging.validate_image(np.zeros((16, 16, 4)))
    with pytest.raises(ValueError):
        imaging.validate_image(np.full((16, 16, 3), 1.5))
