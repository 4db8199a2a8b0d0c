"""Image buffers, color conversion, resampling and quality metrics.

Images are numpy float arrays of shape (H, W, 3), RGB, values in [0, 1].
All internal math is floating point; 8-bit quantization happens exactly
once, inside save_image. Metrics are computed in float64. Resampling is
delegated to torch's bilinear interpolator so that every resize in the
project (model resolution scaling included) uses the same resampler.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

# BT.601 luma weights; chroma is centered at 0 (offsets removed)
_YUV_WR, _YUV_WG, _YUV_WB = 0.299, 0.587, 0.114
_YUV_USCALE = 0.492
_YUV_VSCALE = 0.877

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ValueError(f"{name} must be at least 16x16, got {img.shape[:2]}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rgb_to_yuv(img: np.ndarray) -> np.ndarray:
    """BT.601 full-range RGB -> YUV, chroma centered at 0. Y lies in [0, 1]."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = _YUV_WR * r + _YUV_WG * g + _YUV_WB * b
    u = _YUV_USCALE * (b - y)
    v = _YUV_VSCALE * (r - y)
    return np.stack([y, u, v], axis=-1)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    y, u, v = yuv[..., 0], yuv[..., 1], yuv[..., 2]
    b = y + u / _YUV_USCALE
    r = y + v / _YUV_VSCALE
    g = (y - _YUV_WR * r - _YUV_WB * b) / _YUV_WG
    return np.stack([r, g, b], axis=-1)


def luma(img: np.ndarray) -> np.ndarray:
    return _YUV_WR * img[..., 0] + _YUV_WG * img[..., 1] + _YUV_WB * img[..., 2]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; +inf for identical inputs."""
    _check_same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over luma, 11x11 Gaussian window, valid positions only."""
    _check_same_shape(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = torch.from_numpy(luma(a.astype(np.float64)))[None, None]
    y = torch.from_numpy(luma(b.astype(np.float64)))[None, None]
    w = torch.from_numpy(_gaussian_window(SSIM_WINDOW, SSIM_SIGMA))[None, None]

    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    var_x = F.conv2d(x * x, w) - mu_x * mu_x
    var_y = F.conv2d(y * y, w) - mu_y * mu_y
    cov = F.conv2d(x * y, w) - mu_x * mu_y

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean().item())


def resize(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resample, antialiased on downscale, clamped to [0, 1]."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = img.shape[:2]
    if (new_h, new_w) == (h, w):
        return np.array(img, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img.astype(np.float32))).permute(2, 0, 1)[None]
    out = resize_tensor(t, new_h, new_w)
    return out[0].permute(1, 2, 0).clamp_(0.0, 1.0).numpy().astype(img.dtype, copy=False)


def resize_tensor(batch: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    """The project-wide bilinear resampler for (B, C, H, W) tensors."""
    h, w = batch.shape[-2:]
    if (new_h, new_w) == (h, w):
        return batch
    antialias = new_h < h or new_w < w
    return F.interpolate(
        batch, size=(new_h, new_w), mode="bilinear",
        align_corners=False, antialias=antialias,
    )


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise IOError(f"cannot read image {path}: {exc}") from exc
    return arr


def save_image(img: np.ndarray, path: str | Path, jpeg_quality: int | None = None):
    """Saves as PNG (lossless at 8-bit) or JPEG when the suffix says so.

    jpeg_quality only applies to JPEG output (default 95).
    """
    path = Path(path)
    pil = Image.fromarray(to_uint8(img))
    suffix = path.suffix.lower()
    if suffix in (".jpg", ".jpeg"):
        pil.save(path, format="JPEG", quality=jpeg_quality if jpeg_quality is not None else 95)
    elif suffix == ".png":
        pil.save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format: {suffix or '(none)'}")


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Real JPEG encode/decode through an in-memory buffer."""
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
