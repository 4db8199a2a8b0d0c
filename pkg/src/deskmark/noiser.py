"""Parameterized image distortion suite used in training and evaluation.

Fourteen transforms; each maps [0,1] images to [0,1] images of identical
shape. Train mode is differentiable end to end (JPEG through a DCT-domain
surrogate with soft rounding, posterize through a straight-through
estimator); eval mode uses real JPEG encode/decode and exact bit-masking.
Geometric transforms resample with the bilinear grid sampler and reflection
padding so borders never trivially mark the transform.

Parameter ranges follow the fixed suite table below. Brightness, contrast
and saturation use only the lower and upper bound factors (0.75 or 1.25),
not values in between. Random-resized-crop always retains at least 75% of
the original area; rotation angles stay within [0, 10] degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import imaging

NOISE_KINDS = (
    "jpeg_compression",
    "brightness",
    "contrast",
    "saturation",
    "gaussian_blur",
    "gaussian_noise",
    "color_jiggle",
    "posterize",
    "rgb_shift",
    "flip",
    "rotation",
    "random_erasing",
    "perspective",
    "random_resized_crop",
)

# suite parameter table
JPEG_MIN_QUALITY = 50
BCS_BOUNDS = (0.75, 1.25)
BLUR_KERNEL = 5
BLUR_SIGMA = (0.1, 1.5)
NOISE_STD = 0.04
POSTERIZE_BITS = 4
JIGGLE_RANGES = (0.1, 0.1, 0.1, 0.02)  # brightness, contrast, saturation, hue
RGB_SHIFT_LIMIT = 0.05
FLIP_PROB = 1.0
ROTATION_DEGREES = (0.0, 10.0)
ERASE_SCALE = (0.02, 0.1)
ERASE_RATIO = (0.5, 1.5)
PERSPECTIVE_SCALE = 0.1
RRC_SCALE = (0.75, 1.0)
RRC_RATIO = (3.0 / 4.0, 4.0 / 3.0)

# transforms with no usable gradient; they get surrogate/straight-through paths
NON_SMOOTH_KINDS = ("jpeg_compression", "posterize")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    params: dict = field(default_factory=dict)
    mode: str = "eval"  # "train" (differentiable) or "eval" (exact)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind: {self.kind}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode}")


def sample_suite(seed: int, mode: str = "eval", kinds=NOISE_KINDS) -> list[NoiseSpec]:
    """One parameterized spec per kind; deterministic for a fixed seed.

    Parameters that the table gives as ranges are sampled here; randomness
    that is inherently per-application (noise realizations, erase and crop
    positions, jiggle factors, perspective corners) is drawn at apply time
    from the caller's rng.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for kind in kinds:
        p: dict = {}
        if kind == "jpeg_compression":
            if mode == "train":
                p["quality"] = int(rng.integers(JPEG_MIN_QUALITY, 101))
            else:
                p["quality"] = JPEG_MIN_QUALITY  # worst listed case
        elif kind in ("brightness", "contrast", "saturation"):
            p["factor"] = float(rng.choice(BCS_BOUNDS))
        elif kind == "gaussian_blur":
            p["kernel_size"] = BLUR_KERNEL
            p["sigma"] = float(rng.uniform(*BLUR_SIGMA))
        elif kind == "gaussian_noise":
            p["std"] = NOISE_STD
        elif kind == "color_jiggle":
            p["brightness"], p["contrast"], p["saturation"], p["hue"] = JIGGLE_RANGES
        elif kind == "posterize":
            p["bits"] = POSTERIZE_BITS
        elif kind == "rgb_shift":
            p["limit"] = RGB_SHIFT_LIMIT
        elif kind == "flip":
            p["prob"] = FLIP_PROB
        elif kind == "rotation":
            p["degrees"] = float(rng.uniform(*ROTATION_DEGREES))
        elif kind == "random_erasing":
            p["scale"] = float(rng.uniform(*ERASE_SCALE))
            p["ratio"] = float(rng.uniform(*ERASE_RATIO))
        elif kind == "perspective":
            p["scale"] = PERSPECTIVE_SCALE
        elif kind == "random_resized_crop":
            p["area"] = float(rng.uniform(*RRC_SCALE))
            p["ratio"] = float(math.exp(rng.uniform(math.log(RRC_RATIO[0]),
                                                    math.log(RRC_RATIO[1]))))
        specs.append(NoiseSpec(kind=kind, params=p, mode=mode))
    return specs


def suite_to_config(specs: list[NoiseSpec]) -> list[dict]:
    return [{"kind": s.kind, "params": dict(s.params), "mode": s.mode} for s in specs]


def suite_from_config(rows: list[dict]) -> list[NoiseSpec]:
    return [NoiseSpec(kind=r["kind"], params=dict(r["params"]), mode=r["mode"]) for r in rows]


def apply(spec: NoiseSpec, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Applies one distortion to a single (H, W, 3) image in [0, 1]."""
    imaging.validate_image(img)
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    t = torch.from_numpy(np.ascontiguousarray(img.astype(np.float32))).permute(2, 0, 1)[None]
    out = apply_batch(spec, t, gen)
    return out[0].permute(1, 2, 0).numpy().astype(img.dtype, copy=False)


def apply_batch(spec: NoiseSpec, batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Applies one distortion to a (B, 3, H, W) batch in [0, 1].

    Differentiable with respect to batch when spec.mode == "train".
    """
    fn = _DISPATCH[spec.kind]
    out = fn(batch, spec, gen)
    if out.shape != batch.shape:
        raise AssertionError(f"{spec.kind} changed shape {batch.shape} -> {out.shape}")
    return out


def _rand(gen, *shape):
    return torch.rand(*shape, generator=gen)


def _luma(batch):
    return (0.299 * batch[:, 0:1] + 0.587 * batch[:, 1:2] + 0.114 * batch[:, 2:3])


def _brightness(batch, spec, gen):
    return (batch * spec.params["factor"]).clamp(0.0, 1.0)


def _contrast(batch, spec, gen):
    f = spec.params["factor"]
    mean = _luma(batch).mean(dim=(2, 3), keepdim=True)
    return ((batch - mean) * f + mean).clamp(0.0, 1.0)


def _saturation(batch, spec, gen):
    f = spec.params["factor"]
    gray = _luma(batch)
    return (gray + (batch - gray) * f).clamp(0.0, 1.0)


def _gaussian_kernel1d(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _gaussian_blur(batch, spec, gen):
    size = int(spec.params["kernel_size"])
    sigma = float(spec.params["sigma"])
    k = _gaussian_kernel1d(size, sigma).to(batch.dtype)
    pad = size // 2
    c = batch.shape[1]
    kh = k.view(1, 1, 1, size).expand(c, 1, 1, size)
    kv = k.view(1, 1, size, 1).expand(c, 1, size, 1)
    out = F.pad(batch, (pad, pad, 0, 0), mode="reflect")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (0, 0, pad, pad), mode="reflect")
    out = F.conv2d(out, kv, groups=c)
    return out.clamp(0.0, 1.0)


def _gaussian_noise(batch, spec, gen):
    std = float(spec.params["std"])
    if std == 0.0:
        return batch.clamp(0.0, 1.0)
    noise = torch.randn(batch.shape, generator=gen, dtype=batch.dtype) * std
    return (batch + noise).clamp(0.0, 1.0)


def _color_jiggle(batch, spec, gen):
    b, c, s, h = (spec.params[k] for k in ("brightness", "contrast", "saturation", "hue"))
    n = batch.shape[0]
    fb = 1.0 + (2.0 * _rand(gen, n, 1, 1, 1) - 1.0) * b
    fc = 1.0 + (2.0 * _rand(gen, n, 1, 1, 1) - 1.0) * c
    fs = 1.0 + (2.0 * _rand(gen, n, 1, 1, 1) - 1.0) * s
    fh = (2.0 * _rand(gen, n, 1, 1) - 1.0) * h

    out = batch * fb
    mean = _luma(out).mean(dim=(2, 3), keepdim=True)
    out = (out - mean) * fc + mean
    gray = _luma(out)
    out = gray + (out - gray) * fs
    # hue shift as a rotation of the centered chroma plane
    y = _luma(out)
    u = 0.492 * (out[:, 2:3] - y)
    v = 0.877 * (out[:, 0:1] - y)
    theta = (2.0 * math.pi * fh).view(n, 1, 1, 1).to(batch.dtype)
    u2 = u * torch.cos(theta) - v * torch.sin(theta)
    v2 = u * torch.sin(theta) + v * torch.cos(theta)
    bch = y + u2 / 0.492
    rch = y + v2 / 0.877
    gch = (y - 0.299 * rch - 0.114 * bch) / 0.587
    return torch.cat([rch, gch, bch], dim=1).clamp(0.0, 1.0)


def _posterize(batch, spec, gen):
    bits = int(spec.params["bits"])
    shift = 8 - bits
    levels = torch.floor(batch.detach().double() * 255.0).to(torch.int64)
    q = ((levels >> shift) << shift).to(batch.dtype) / 255.0
    if spec.mode == "train":
        return batch + (q - batch).detach()  # straight-through gradient
    return q


def _rgb_shift(batch, spec, gen):
    limit = float(spec.params["limit"])
    n = batch.shape[0]
    shifts = (2.0 * _rand(gen, n, 3, 1, 1) - 1.0) * limit
    return (batch + shifts).clamp(0.0, 1.0)


def _flip(batch, spec, gen):
    if float(_rand(gen, 1)) < spec.params["prob"]:
        return torch.flip(batch, dims=[-1])
    return batch


def _base_grid(h, w, dtype):
    ys = torch.arange(h, dtype=dtype) + 0.5
    xs = torch.arange(w, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy  # pixel-center coordinates


def _sample_at(batch, src_x, src_y):
    """grid_sample with reflection padding; src_* are pixel-center coords."""
    _, _, h, w = batch.shape
    nx = 2.0 * src_x / w - 1.0
    ny = 2.0 * src_y / h - 1.0
    grid = torch.stack([nx, ny], dim=-1)
    if grid.dim() == 3:
        grid = grid[None].expand(batch.shape[0], -1, -1, -1)
    return F.grid_sample(batch, grid.to(batch.dtype), mode="bilinear",
                         padding_mode="reflection", align_corners=False)


def _rotation(batch, spec, gen):
    deg = float(spec.params["degrees"])
    theta = math.radians(deg)
    _, _, h, w = batch.shape
    gx, gy = _base_grid(h, w, batch.dtype)
    cx, cy = w / 2.0, h / 2.0
    # inverse map: rotate output coords by -theta around the center
    dx, dy = gx - cx, gy - cy
    src_x = cx + math.cos(theta) * dx + math.sin(theta) * dy
    src_y = cy - math.sin(theta) * dx + math.cos(theta) * dy
    return _sample_at(batch, src_x, src_y).clamp(0.0, 1.0)


def _random_erasing(batch, spec, gen):
    scale = float(spec.params["scale"])
    ratio = float(spec.params["ratio"])
    n, _, h, w = batch.shape
    area = scale * h * w
    eh = max(1, min(h, int(round(math.sqrt(area * ratio)))))
    ew = max(1, min(w, int(round(math.sqrt(area / ratio)))))
    mask = torch.ones(n, 1, h, w, dtype=batch.dtype)
    for i in range(n):
        top = int(_rand(gen, 1) * (h - eh + 1))
        left = int(_rand(gen, 1) * (w - ew + 1))
        mask[i, :, top:top + eh, left:left + ew] = 0.0
    return batch * mask


def _homography_from_points(dst_pts: torch.Tensor, src_pts: torch.Tensor) -> torch.Tensor:
    """8-parameter homography with src = H(dst), from 4 point pairs."""
    rows, rhs = [], []
    for (xo, yo), (xi, yi) in zip(dst_pts, src_pts):
        rows.append([xo, yo, 1, 0, 0, 0, -xi * xo, -xi * yo])
        rows.append([0, 0, 0, xo, yo, 1, -yi * xo, -yi * yo])
        rhs.extend([xi, yi])
    A = torch.tensor(rows, dtype=torch.float64)
    b = torch.tensor(rhs, dtype=torch.float64)
    return torch.linalg.solve(A, b)


def _perspective(batch, spec, gen):
    scale = float(spec.params["scale"])
    n, _, h, w = batch.shape
    gx, gy = _base_grid(h, w, batch.dtype)
    half_w, half_h = scale * w / 2.0, scale * h / 2.0
    corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
    outs = []
    for i in range(n):
        # each corner is pulled inward by up to scale * half-dimension
        d = _rand(gen, 8)
        signs = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
        dst = [
            (cx + sx * float(d[2 * j]) * half_w, cy + sy * float(d[2 * j + 1]) * half_h)
            for j, ((cx, cy), (sx, sy)) in enumerate(zip(corners, signs))
        ]
        hcoef = _homography_from_points(
            torch.tensor(dst, dtype=torch.float64),
            torch.tensor(corners, dtype=torch.float64),
        )
        a, bb, c, dd, e, f, g, hh = (float(v) for v in hcoef)
        den = g * gx + hh * gy + 1.0
        src_x = (a * gx + bb * gy + c) / den
        src_y = (dd * gx + e * gy + f) / den
        outs.append(_sample_at(batch[i:i + 1], src_x, src_y))
    return torch.cat(outs, dim=0).clamp(0.0, 1.0)


def _random_resized_crop(batch, spec, gen):
    area_frac = float(spec.params["area"])
    ratio = float(spec.params["ratio"])
    n, _, h, w = batch.shape
    # keep the retained area exact; project the aspect ratio into the
    # interval where the crop still fits inside the image
    lo = area_frac * w / h
    hi = w / (area_frac * h)
    ratio = min(max(ratio, lo), hi)
    crop_w = min(w, math.sqrt(area_frac * w * h * ratio))
    crop_h = min(h, math.sqrt(area_frac * w * h / ratio))
    outs = []
    gx, gy = _base_grid(h, w, batch.dtype)
    for i in range(n):
        left = float(_rand(gen, 1)) * (w - crop_w)
        top = float(_rand(gen, 1)) * (h - crop_h)
        src_x = left + gx * (crop_w / w)
        src_y = top + gy * (crop_h / h)
        outs.append(_sample_at(batch[i:i + 1], src_x, src_y))
    return torch.cat(outs, dim=0).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# JPEG: real encode/decode in eval mode, DCT-domain surrogate in train mode

_JPEG_QY = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=torch.float32)

_JPEG_QC = torch.tensor([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=torch.float32)


def _dct_matrix() -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    n = torch.arange(8, dtype=torch.float64)
    d = torch.cos((2 * n[None, :] + 1) * k[:, None] * math.pi / 16.0)
    d[0] *= 1.0 / math.sqrt(2.0)
    return (d * 0.5).to(torch.float32)


_DCT = _dct_matrix()


def _quality_scaled(table: torch.Tensor, quality: int) -> torch.Tensor:
    if quality < 50:
        s = 5000.0 / quality
    else:
        s = 200.0 - 2.0 * quality
    return torch.clamp(torch.floor((table * s + 50.0) / 100.0), 1.0, 255.0)


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    r = torch.round(x).detach()
    return r + (x - r) ** 3


def _blockwise_dct_quant(plane: torch.Tensor, qtable: torch.Tensor) -> torch.Tensor:
    """plane: (B, 1, H, W) centered values in [-128, 127]; H, W multiples of 8."""
    b, _, h, w = plane.shape
    d = _DCT.to(plane.dtype)
    blocks = F.unfold(plane, kernel_size=8, stride=8)  # (B, 64, L)
    blocks = blocks.transpose(1, 2).reshape(-1, 8, 8)
    coeff = d @ blocks @ d.T
    coeff = _soft_round(coeff / qtable.to(plane.dtype)) * qtable.to(plane.dtype)
    rec = d.T @ coeff @ d
    rec = rec.reshape(b, -1, 64).transpose(1, 2)
    return F.fold(rec, output_size=(h, w), kernel_size=8, stride=8)


def _jpeg_surrogate(batch: torch.Tensor, quality: int) -> torch.Tensor:
    """Differentiable approximation of 4:2:0 JPEG at the given quality."""
    _, _, h, w = batch.shape
    pad_h = (-h) % 16
    pad_w = (-w) % 16
    x = F.pad(batch, (0, pad_w, 0, pad_h), mode="replicate") * 255.0
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0

    qy = _quality_scaled(_JPEG_QY, quality)
    qc = _quality_scaled(_JPEG_QC, quality)
    y = _blockwise_dct_quant(y - 128.0, qy) + 128.0
    cb_small = F.avg_pool2d(cb, 2)
    cr_small = F.avg_pool2d(cr, 2)
    cb = F.interpolate(_blockwise_dct_quant(cb_small - 128.0, qc) + 128.0,
                       scale_factor=2, mode="nearest")
    cr = F.interpolate(_blockwise_dct_quant(cr_small - 128.0, qc) + 128.0,
                       scale_factor=2, mode="nearest")

    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    out = torch.cat([r, g, b], dim=1) / 255.0
    return out[:, :, :h, :w].clamp(0.0, 1.0)


def _jpeg(batch, spec, gen):
    quality = int(spec.params["quality"])
    if spec.mode == "train":
        return _jpeg_surrogate(batch, quality)
    outs = []
    for i in range(batch.shape[0]):
        img = batch[i].detach().permute(1, 2, 0).numpy()
        out = imaging.jpeg_roundtrip(np.clip(img, 0.0, 1.0), quality)
        outs.append(torch.from_numpy(out).permute(2, 0, 1))
    return torch.stack(outs).to(batch.dtype)


_DISPATCH = {
    "jpeg_compression": _jpeg,
    "brightness": _brightness,
    "contrast": _contrast,
    "saturation": _saturation,
    "gaussian_blur": _gaussian_blur,
    "gaussian_noise": _gaussian_noise,
    "color_jiggle": _color_jiggle,
    "posterize": _posterize,
    "rgb_shift": _rgb_shift,
    "flip": _flip,
    "rotation": _rotation,
    "random_erasing": _random_erasing,
    "perspective": _perspective,
    "random_resized_crop": _random_resized_crop,
}
