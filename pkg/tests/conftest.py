import numpy as np
import pytest
import torch
import torch.nn.functional as F

from deskmark.model import ModelConfig, load_checkpoint
from deskmark.training import TrainConfig, train


def synth_images(n, size, seed=7, roughness=0.2):
    """Smooth synthetic test images: bicubic-upsampled noise plus fine grain."""
    rng = np.random.default_rng(seed)
    imgs = []
    for _ in range(n):
        base = rng.random((8, 8, 3)).astype(np.float32)
        t = torch.from_numpy(base).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=(size, size), mode="bicubic", align_corners=False)
        img = t.clamp(0, 1)[0].permute(1, 2, 0).numpy()
        img = (1.0 - roughness) * img + roughness * rng.random((size, size, 3), dtype=np.float32)
        imgs.append(np.clip(img, 0.0, 1.0))
    return np.stack(imgs).astype(np.float32)


TOY16_CONFIG = TrainConfig(
    model=ModelConfig(working_resolution=64, bit_length=16, encoder_base_channels=16,
                      decoder_widths=(16, 32, 64, 128), decoder_depths=(1, 1, 2, 1),
                      seed=0),
    steps=800, batch_size=8, lr=1e-3, seed=0,
    noise_kinds=("flip", "gaussian_blur"), log_every=10,
)

TOY256_CONFIG = TrainConfig(
    model=ModelConfig(working_resolution=64, bit_length=256, encoder_base_channels=16,
                      decoder_widths=(24, 48, 96, 256), decoder_depths=(1, 1, 2, 1),
                      watermark_plane_channels=8, residual_gain_init=0.1, seed=0),
    steps=1500, batch_size=8, lr=1e-3, lr_schedule="constant", seed=0,
    noise_kinds=("flip", "gaussian_blur"), log_every=25,
)


@pytest.fixture(scope="session")
def toy16(tmp_path_factory):
    """Three-stage toy run: 8 images, 64x64, 16 bits. Shared across the suite."""
    out_dir = tmp_path_factory.mktemp("toy16")
    images = synth_images(8, 64, seed=7)
    ckpt = train(images, TOY16_CONFIG, out_dir)
    model, meta = load_checkpoint(ckpt)
    return {"ckpt": ckpt, "model": model, "meta": meta, "images": images,
            "config": TOY16_CONFIG, "out_dir": out_dir}


@pytest.fixture(scope="session")
def toy256(tmp_path_factory):
    """UUID-capacity toy run: 4 images, 64x64, 256 bits."""
    out_dir = tmp_path_factory.mktemp("toy256")
    images = synth_images(4, 64, seed=7)
    ckpt = train(images, TOY256_CONFIG, out_dir)
    model, meta = load_checkpoint(ckpt)
    return {"ckpt": ckpt, "model": model, "meta": meta, "images": images,
            "config": TOY256_CONFIG, "out_dir": out_dir}
