"""Watermark encoder/decoder networks and checkpoint I/O.

The encoder turns (cover image, bit string) into a low-resolution residual:
bits pass through a learned linear layer into a small spatial block which is
nearest-upsampled, centered and zero-padded to the working resolution, then
concatenated with the downscaled cover and fed through a residual generator
(conv stem, two strided downsampling blocks, four instance-normalized
residual blocks, two upsampling blocks with skip connections) followed by
three 1x1 convolutions. The tanh output is scaled by a learnable gain. The
residual is bilinearly upscaled to the cover's native resolution and added.

The decoder is a reduced-width ConvNeXt-style backbone: patchify stem,
depthwise 7x7 convolutions, inverted bottlenecks, layer scale, and
per-sample channel LayerNorm only - no batch-coupled normalization, so
decoding a batch equals decoding images one at a time.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import resize_tensor, validate_image

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# geometry of the watermark plane block before nearest upsampling
_PLANE_BLOCK = 16


@dataclass
class ModelConfig:
    working_resolution: int = 256
    bit_length: int = 100
    encoder_base_channels: int = 32
    decoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    decoder_depths: tuple[int, ...] = (1, 1, 3, 1)
    watermark_plane_channels: int = 4
    residual_gain_init: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.decoder_widths = tuple(self.decoder_widths)
        self.decoder_depths = tuple(self.decoder_depths)
        if self.working_resolution % 16 != 0 or self.working_resolution < 32:
            raise ValueError("working_resolution must be a multiple of 16, >= 32")
        if self.bit_length < 1:
            raise ValueError("bit_length must be >= 1")
        if len(self.decoder_widths) != len(self.decoder_depths):
            raise ValueError("decoder_widths and decoder_depths must align")


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, H, W); per-sample only."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class WatermarkPreprocessor(nn.Module):
    """bits -> linear -> 16x16 block -> nearest upsample -> centered zero pad."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.watermark_plane_channels
        self.channels = c
        self.resolution = cfg.working_resolution
        self.upsample_factor = cfg.working_resolution // (2 * _PLANE_BLOCK)
        self.linear = nn.Linear(cfg.bit_length, c * _PLANE_BLOCK * _PLANE_BLOCK)

    def forward(self, bits: torch.Tensor) -> torch.Tensor:
        if bits.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"expected {self.linear.in_features} bits, got {bits.shape[-1]}"
            )
        b = bits.shape[0]
        block = self.linear(bits * 2.0 - 1.0).view(b, self.channels, _PLANE_BLOCK, _PLANE_BLOCK)
        block = F.interpolate(block, scale_factor=self.upsample_factor, mode="nearest")
        pad = (self.resolution - block.shape[-1]) // 2
        return F.pad(block, (pad, pad, pad, pad))


def _conv_in_relu(cin, cout, kernel, stride=1):
    # padding keeps size for stride 1 and halves it exactly for stride 2
    pad = kernel // 2 if stride == 1 else (kernel - stride) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, padding_mode="reflect"),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Produces a bounded 3-channel residual at the working resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        base = cfg.encoder_base_channels
        cin = 3 + cfg.watermark_plane_channels
        self.stem = _conv_in_relu(cin, base, 7)
        self.down1 = _conv_in_relu(base, base * 2, 4, stride=2)
        self.down2 = _conv_in_relu(base * 2, base * 4, 4, stride=2)
        self.blocks = nn.Sequential(*[ResidualBlock(base * 4) for _ in range(4)])
        self.up1 = _conv_in_relu(base * 4, base * 2, 5)
        self.up2 = _conv_in_relu(base * 2, base, 5)
        self.post = nn.Sequential(
            nn.Conv2d(base, base, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, base, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, 3, 1),
        )
        self.gain = nn.Parameter(torch.tensor(float(cfg.residual_gain_init)))

    def forward(self, x):
        s0 = self.stem(x)
        s1 = self.down1(s0)
        h = self.down2(s1)
        h = self.blocks(h)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest")) + s1
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest")) + s0
        return torch.tanh(self.post(h)) * self.gain


class ConvNeXtBlock(nn.Module):
    def __init__(self, channels, layer_scale_init=1e-2):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = nn.LayerNorm(channels)
        self.pwconv1 = nn.Linear(channels, 4 * channels)
        self.pwconv2 = nn.Linear(4 * channels, channels)
        self.gamma = nn.Parameter(layer_scale_init * torch.ones(channels))

    def forward(self, x):
        h = self.dwconv(x)
        h = h.permute(0, 2, 3, 1)
        h = self.norm(h)
        h = self.pwconv2(F.gelu(self.pwconv1(h)))
        h = self.gamma * h
        return x + h.permute(0, 3, 1, 2)


class BitDecoder(nn.Module):
    """ConvNeXt-style backbone with an l-dimensional logit head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths, depths = cfg.decoder_widths, cfg.decoder_depths
        self.resolution = cfg.working_resolution
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 4, stride=4),
            ChannelLayerNorm(widths[0]),
        )
        stages = []
        for i, (w, d) in enumerate(zip(widths, depths)):
            if i > 0:
                stages.append(nn.Sequential(
                    ChannelLayerNorm(widths[i - 1]),
                    nn.Conv2d(widths[i - 1], w, 2, stride=2),
                ))
            stages.append(nn.Sequential(*[ConvNeXtBlock(w) for _ in range(d)]))
        self.stages = nn.Sequential(*stages)
        self.head_norm = nn.LayerNorm(widths[-1])
        self.head = nn.Linear(widths[-1], cfg.bit_length)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, l) logits. Resizes internally."""
        y = resize_tensor(y, self.resolution, self.resolution)
        h = self.stem(y * 2.0 - 1.0)
        h = self.stages(h)
        h = h.mean(dim=(2, 3))
        return self.head(self.head_norm(h))


class WatermarkModel(nn.Module):
    """Encoder + decoder pair with resolution scaling."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.preprocessor = WatermarkPreprocessor(config)
            self.generator = ResidualGenerator(config)
            self.decoder = BitDecoder(config)

    def encode_parts(self, x: torch.Tensor, bits: torch.Tensor) -> dict:
        """Full encoding pipeline; also exposes the low-resolution pair.

        Keys: x_tilde (clamped), residual, pre_clamp, x_low, res_low.
        Losses should use pre-clamp values so gradients survive saturation.
        """
        h, w = x.shape[-2:]
        r = self.config.working_resolution
        if min(h, w) * 4 < r:
            raise ValueError(f"input {h}x{w} is too small for working resolution {r}")
        x_low = resize_tensor(x, r, r)
        planes = self.preprocessor(bits)
        res_low = self.generator(torch.cat([x_low * 2.0 - 1.0, planes], dim=1))
        res = resize_tensor(res_low, h, w)
        pre_clamp = x + res
        return {
            "x_tilde": pre_clamp.clamp(0.0, 1.0),
            "residual": res,
            "pre_clamp": pre_clamp,
            "x_low": x_low,
            "res_low": res_low,
        }

    def encode_batch(self, x: torch.Tensor, bits: torch.Tensor):
        """Returns (clamped watermarked, residual, pre-clamp watermarked).

        x: (B, 3, H, W) in [0, 1]; bits: (B, l) in {0, 1}.
        """
        parts = self.encode_parts(x, bits)
        return parts["x_tilde"], parts["residual"], parts["pre_clamp"]

    def decode_logits(self, y: torch.Tensor) -> torch.Tensor:
        return self.decoder(y)

    def decode_batch(self, y: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> soft bits in (0, 1)."""
        return torch.sigmoid(self.decoder(y))

    # numpy-facing single-image API

    @torch.no_grad()
    def embed(self, img: np.ndarray, bits: np.ndarray):
        """Embeds bits into one image; returns (watermarked, residual) arrays."""
        validate_image(img)
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(img.astype(np.float32))).permute(2, 0, 1)[None]
        w = torch.from_numpy(np.asarray(bits, dtype=np.float32))[None]
        x_tilde, res, _ = self.encode_batch(x, w)
        return (
            x_tilde[0].permute(1, 2, 0).numpy(),
            res[0].permute(1, 2, 0).numpy(),
        )

    @torch.no_grad()
    def extract(self, img: np.ndarray) -> np.ndarray:
        """Soft bit estimates in (0, 1); threshold at 0.5 for hard bits."""
        validate_image(img)
        self.eval()
        y = torch.from_numpy(np.ascontiguousarray(img.astype(np.float32))).permute(2, 0, 1)[None]
        return self.decode_batch(y)[0].numpy()


def save_checkpoint(model: WatermarkModel, path: str | Path, train_meta: dict | None = None):
    """Atomic single-file checkpoint embedding the model config."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "model_state": model.state_dict(),
        "train_meta": train_meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, config: ModelConfig | None = None):
    """Loads a checkpoint; returns (model, train_meta).

    The embedded config always wins; a conflicting caller-supplied config is
    reported with a warning.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise IOError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise IOError(f"{path} is not a deskmark checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise IOError(
            f"checkpoint version {payload['version']} != supported {CHECKPOINT_VERSION}"
        )
    ckpt_config = ModelConfig(**payload["config"])
    if config is not None and asdict(config) != asdict(ckpt_config):
        logger.warning("checkpoint config overrides the supplied config")
    model = WatermarkModel(ckpt_config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload.get("train_meta", {})
