"""Losses, worst-case noise selection and the three-stage training loop.

Total loss = alpha_q * quality + alpha_r * recovery. Quality is the sum of
YUV-space MSE, a perceptual feature distance, a focal frequency term and a
Wasserstein critic score, all computed at the working (downscaled)
resolution with unit beta weights. Recovery is bit BCE on the clean encoded
image plus 0.5-weighted BCE terms for the currently active worst-k noises
(k = 2, reselected every 200 steps by re-scoring the full suite).

Stages: "extraction" holds alpha_q at a low value until clean bit accuracy
is reliably high, "reconstruction" ramps alpha_q linearly to its maximum,
and "robustness" switches on the worst-k noise terms.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from . import noiser
from .model import ModelConfig, WatermarkModel, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

STAGES = ("extraction", "reconstruction", "robustness")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    alpha_q_low: float = 0.1
    alpha_q_max: float = 10.0
    alpha_r: float = 1.0
    beta_yuv: float = 1.0
    beta_lpips: float = 1.0
    beta_ffl: float = 1.0
    beta_gan: float = 1.0
    gamma: float = 0.5       # per-noise recovery weight
    top_k: int = 2
    reeval_interval: int = 200


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # or "constant"
    critic_lr: float | None = None  # defaults to 4x lr (critic must keep pace)
    gp_coefficient: float = 10.0
    stage1_acc_threshold: float = 0.95
    stage1_window: int = 50
    ramp_fraction: float = 0.2
    noise_kinds: tuple[str, ...] = noiser.NOISE_KINDS
    noise_seed: int = 0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.critic_lr is None:
            self.critic_lr = 4.0 * self.lr
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule: {self.lr_schedule}")
        self.noise_kinds = tuple(self.noise_kinds)
        unknown = set(self.noise_kinds) - set(noiser.NOISE_KINDS)
        if unknown:
            raise ValueError(f"unknown noise kinds: {sorted(unknown)}")
        if self.weights.top_k > len(self.noise_kinds):
            raise ValueError("top_k exceeds the number of noises in the suite")


def load_train_config(path: str | Path) -> TrainConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return TrainConfig(**raw)


def dump_config(cfg: TrainConfig, path: str | Path):
    """Writes the fully resolved configuration next to the run outputs."""
    with open(path, "w") as fh:
        yaml.safe_dump(_jsonable(asdict(cfg)), fh, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# quality loss terms

_YUV_T = torch.tensor([
    [0.299, 0.587, 0.114],
    [0.492 * -0.299, 0.492 * -0.587, 0.492 * (1 - 0.114)],
    [0.877 * (1 - 0.299), 0.877 * -0.587, 0.877 * -0.114],
])


def yuv_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    m = _YUV_T.to(a.dtype)
    ya = torch.einsum("ij,bjhw->bihw", m, a)
    yb = torch.einsum("ij,bjhw->bihw", m, b)
    return F.mse_loss(ya, yb)


def focal_frequency_loss(a: torch.Tensor, b: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Per-bin squared spectral error weighted by normalized error magnitude."""
    fa = torch.fft.fft2(a, norm="ortho")
    fb = torch.fft.fft2(b, norm="ortho")
    diff = fa - fb
    err = diff.real**2 + diff.imag**2
    weight = err.sqrt() ** alpha
    peak = weight.amax(dim=(-2, -1), keepdim=True)
    weight = weight / peak.clamp_min(1e-12)
    return (weight.detach() * err).mean()


class PerceptualFeatures(nn.Module):
    """Small frozen conv stack; deterministic random init, no external weights."""

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layers = []
            cin = 3
            for w in widths:
                layers.append(nn.Conv2d(cin, w, 3, stride=2, padding=1))
                cin = w
            self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


def perceptual_distance(net: PerceptualFeatures, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    total = a.new_zeros(())
    for fa, fb in zip(net(a), net(b)):
        na = fa / fa.norm(dim=1, keepdim=True).clamp_min(1e-8)
        nb = fb / fb.norm(dim=1, keepdim=True).clamp_min(1e-8)
        total = total + F.mse_loss(na, nb)
    return total


class Critic(nn.Module):
    """4-layer strided conv critic for the Wasserstein term."""

    def __init__(self, base: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, base, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(base * 4, 1, 4, stride=2, padding=1),
            )

    def forward(self, x):
        return self.net(x * 2.0 - 1.0).mean(dim=(1, 2, 3))


def gradient_penalty(critic: Critic, real: torch.Tensor, fake: torch.Tensor,
                     gen: torch.Generator) -> torch.Tensor:
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=gen, dtype=real.dtype)
    mix = (eps * real + (1.0 - eps) * fake).requires_grad_(True)
    score = critic(mix).sum()
    grad = torch.autograd.grad(score, mix, create_graph=True)[0]
    norm = grad.flatten(1).norm(dim=1)
    return ((norm - 1.0) ** 2).mean()


def critic_step(critic: Critic, opt: torch.optim.Optimizer, real: torch.Tensor,
                fake: torch.Tensor, gp_coefficient: float, gen: torch.Generator) -> dict:
    fake = fake.detach()
    real = real.detach()
    w_dist = critic(fake).mean() - critic(real).mean()
    gp = gradient_penalty(critic, real, fake, gen)
    loss = w_dist + gp_coefficient * gp
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return {"critic_w": float(w_dist.detach()), "critic_gp": float(gp.detach())}


def quality_loss(x: torch.Tensor, x_tilde: torch.Tensor, weights: LossWeights,
                 perceptual: PerceptualFeatures | None = None,
                 critic: Critic | None = None):
    """Four-term image quality loss at the working resolution.

    Returns (scalar, per-term breakdown). Both inputs are (B, 3, R, R).
    """
    terms = {}
    terms["yuv"] = weights.beta_yuv * yuv_mse(x, x_tilde)
    if perceptual is not None:
        terms["lpips"] = weights.beta_lpips * perceptual_distance(perceptual, x, x_tilde)
    terms["ffl"] = weights.beta_ffl * focal_frequency_loss(x, x_tilde)
    if critic is not None:
        terms["gan"] = weights.beta_gan * (-critic(x_tilde).mean())
    total = sum(terms.values())
    return total, terms


def _bitwise_bce(logits: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    # summed over bits, averaged over the batch
    return F.binary_cross_entropy_with_logits(logits, bits, reduction="sum") / logits.shape[0]


def recovery_loss(bits: torch.Tensor, x_tilde: torch.Tensor, model: WatermarkModel,
                  active: list[noiser.NoiseSpec], weights: LossWeights,
                  gen: torch.Generator):
    """Clean BCE plus gamma-weighted BCE under each active (train-mode) noise."""
    clean = _bitwise_bce(model.decode_logits(x_tilde), bits)
    total = clean
    for spec in active:
        noised = noiser.apply_batch(spec, x_tilde.clamp(0.0, 1.0), gen)
        total = total + weights.gamma * _bitwise_bce(model.decode_logits(noised), bits)
    return total, clean


def worst_k_indices(losses, k: int) -> list[int]:
    """Indices of the k largest per-noise losses, ascending index order.

    Because the robust objective sums independent per-noise terms, the
    maximizing size-k subset is exactly the k largest entries.
    """
    order = np.argsort(np.asarray(losses, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[-k:])


@torch.no_grad()
def reevaluate_worst_k(model: WatermarkModel, x: torch.Tensor, bits: torch.Tensor,
                       suite: list[noiser.NoiseSpec], k: int,
                       gen: torch.Generator):
    """Scores every noise on one batch and returns (indices, per-noise losses)."""
    x_tilde, _, _ = model.encode_batch(x, bits)
    losses = []
    for spec in suite:
        noised = noiser.apply_batch(spec, x_tilde, gen)
        losses.append(float(_bitwise_bce(model.decode_logits(noised), bits)))
    return worst_k_indices(losses, k), losses


def alpha_q_at(stage: str, ramp_progress: float, weights: LossWeights) -> float:
    """Stage-dependent quality weight; non-decreasing, capped at the maximum."""
    if stage == "extraction":
        return weights.alpha_q_low
    if stage == "reconstruction":
        p = min(max(ramp_progress, 0.0), 1.0)
        return weights.alpha_q_low + p * (weights.alpha_q_max - weights.alpha_q_low)
    return weights.alpha_q_max


def total_loss(x_low, x_tilde_low, bits, x_tilde_full, model, state, cfg,
               perceptual, critic, active, gen):
    """alpha_q * quality + alpha_r * recovery, with per-term breakdown."""
    w = cfg.weights
    q, q_terms = quality_loss(x_low, x_tilde_low, w, perceptual, critic)
    r, bce_clean = recovery_loss(bits, x_tilde_full, model, active, w, gen)
    aq = alpha_q_at(state.stage, state.ramp_progress, w)
    loss = aq * q + w.alpha_r * r
    breakdown = {f"loss_{k}": float(v.detach()) for k, v in q_terms.items()}
    breakdown.update(loss_quality=float(q.detach()), loss_recovery=float(r.detach()),
                     bce_clean=float(bce_clean.detach()), alpha_q=aq)
    return loss, breakdown


@dataclass
class TrainState:
    stage: str = "extraction"
    step: int = 0
    ramp_progress: float = 0.0
    active_noise_indices: list[int] = field(default_factory=list)


def _psnr_t(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(F.mse_loss(a, b))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


class Trainer:
    """Single-writer training loop emitting JSONL metrics and checkpoints."""

    def __init__(self, images: np.ndarray, cfg: TrainConfig, out_dir: str | Path):
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError("images must be (N, H, W, 3)")
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.images = torch.from_numpy(
            np.ascontiguousarray(images.astype(np.float32))).permute(0, 3, 1, 2)
        self.model = WatermarkModel(cfg.model)
        self.perceptual = PerceptualFeatures(seed=cfg.model.seed)
        self.critic = Critic(seed=cfg.model.seed + 1)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.critic_lr,
                                           betas=(0.5, 0.9))
        if cfg.lr_schedule == "cosine":
            self.sched = torch.optim.lr_scheduler.CosineAnnealingLR(self.opt, T_max=cfg.steps)
        else:
            self.sched = torch.optim.lr_scheduler.ConstantLR(self.opt, factor=1.0, total_iters=0)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.suite = noiser.sample_suite(cfg.noise_seed, mode="train", kinds=cfg.noise_kinds)
        self.state = TrainState()
        self.acc_window: deque[float] = deque(maxlen=cfg.stage1_window)
        self.ramp_steps = max(1, int(cfg.ramp_fraction * cfg.steps))
        self._ramp_start: int | None = None
        self._log_fh = None

    # -- logging -----------------------------------------------------------

    def _log(self, record: dict):
        if self._log_fh is None:
            self._log_fh = open(self.out_dir / "metrics.jsonl", "a")
        self._log_fh.write(json.dumps(_jsonable(record)) + "\n")
        self._log_fh.flush()

    def _transition(self, new_stage: str):
        self._log({"event": "stage_transition", "from": self.state.stage,
                   "to": new_stage, "step": self.state.step})
        logger.info("stage %s -> %s at step %d", self.state.stage, new_stage, self.state.step)
        self.state.stage = new_stage

    # -- stage machine -----------------------------------------------------

    def _update_stage(self, clean_acc: float):
        st = self.state
        if st.stage == "extraction":
            self.acc_window.append(clean_acc)
            if (len(self.acc_window) == self.cfg.stage1_window
                    and np.mean(self.acc_window) >= self.cfg.stage1_acc_threshold):
                self._transition("reconstruction")
                self._ramp_start = st.step
        elif st.stage == "reconstruction":
            st.ramp_progress = (st.step - self._ramp_start) / self.ramp_steps
            if st.ramp_progress >= 1.0:
                st.ramp_progress = 1.0
                self._transition("robustness")
                self._reselect_noises()
        elif st.stage == "robustness":
            if (st.step % self.cfg.weights.reeval_interval) == 0:
                self._reselect_noises()

    def _reselect_noises(self):
        x, bits = self._sample_batch()
        idx, losses = reevaluate_worst_k(self.model, x, bits, self.suite,
                                         self.cfg.weights.top_k, self.gen)
        self.state.active_noise_indices = idx
        self._log({"event": "worst_k", "step": self.state.step, "indices": idx,
                   "losses": losses})

    # -- data --------------------------------------------------------------

    def _sample_batch(self):
        n = self.images.shape[0]
        idx = torch.randint(0, n, (self.cfg.batch_size,), generator=self.gen)
        x = self.images[idx]
        bits = torch.randint(0, 2, (self.cfg.batch_size, self.cfg.model.bit_length),
                             generator=self.gen).float()
        return x, bits

    # -- main loop ---------------------------------------------------------

    def run(self) -> Path:
        cfg = self.cfg
        dump_config(cfg, self.out_dir / "config.resolved.yaml")
        ckpt_path = self.out_dir / "model.ckpt"
        while self.state.step < cfg.steps:
            self.state.step += 1
            st = self.state
            x, bits = self._sample_batch()
            parts = self.model.encode_parts(x, bits)
            x_tilde, pre_clamp = parts["x_tilde"], parts["pre_clamp"]
            x_low = parts["x_low"]
            x_tilde_low = x_low + parts["res_low"]

            critic_stats = critic_step(self.critic, self.critic_opt, x_low,
                                       x_tilde_low, cfg.gp_coefficient, self.gen)

            active = [self.suite[i] for i in st.active_noise_indices]
            loss, breakdown = total_loss(x_low, x_tilde_low, bits, pre_clamp,
                                         self.model, st, cfg, self.perceptual,
                                         self.critic, active, self.gen)
            if not torch.isfinite(loss):
                self._dump_divergence(breakdown)
                raise TrainingDiverged(f"non-finite loss at step {st.step}")

            self.opt.zero_grad(set_to_none=True)
            loss.backward()
            self.opt.step()
            self.sched.step()

            with torch.no_grad():
                hard = (self.model.decode_batch(x_tilde) > 0.5).float()
                clean_acc = float((hard == bits).float().mean())
                psnr_val = _psnr_t(x, x_tilde)

            self._update_stage(clean_acc)

            if st.step % cfg.log_every == 0 or st.step == cfg.steps:
                rec = {"step": st.step, "stage": st.stage, "loss_total": float(loss),
                       "bit_acc": clean_acc, "psnr": psnr_val,
                       "active_noises": list(st.active_noise_indices),
                       "lr": self.sched.get_last_lr()[0]}
                rec.update(breakdown)
                rec.update(critic_stats)
                self._log(rec)

            if st.step % cfg.checkpoint_every == 0 or st.step == cfg.steps:
                save_checkpoint(self.model, ckpt_path, train_meta=self._train_meta())

        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        return ckpt_path

    def resume_state(self, meta: dict):
        """Restores the stage machine from checkpoint training metadata."""
        st = self.state
        st.step = int(meta.get("step", 0))
        st.stage = meta.get("stage", "extraction")
        st.ramp_progress = float(meta.get("ramp_progress", 0.0))
        st.active_noise_indices = list(meta.get("active_noise_indices", []))
        if st.stage == "reconstruction":
            self._ramp_start = st.step - int(st.ramp_progress * self.ramp_steps)
        logger.info("resumed at step %d, stage %s", st.step, st.stage)

    def _train_meta(self) -> dict:
        return {
            "step": self.state.step,
            "stage": self.state.stage,
            "alpha_q": alpha_q_at(self.state.stage, self.state.ramp_progress,
                                  self.cfg.weights),
            "ramp_progress": self.state.ramp_progress,
            "active_noise_indices": list(self.state.active_noise_indices),
            "noise_kinds": list(self.cfg.noise_kinds),
        }

    def _dump_divergence(self, breakdown: dict):
        path = self.out_dir / "diverged.json"
        with open(path, "w") as fh:
            json.dump(_jsonable({"step": self.state.step, "stage": self.state.stage,
                                 "breakdown": breakdown}), fh, indent=2)
        logger.error("training diverged; diagnostics at %s", path)


def train(images: np.ndarray, cfg: TrainConfig, out_dir: str | Path,
          resume_from: str | Path | None = None) -> Path:
    """Runs the full three-stage schedule; returns the checkpoint path."""
    if resume_from is None:
        return Trainer(images, cfg, out_dir).run()
    model, meta = load_checkpoint(resume_from, config=cfg.model)
    cfg = replace(cfg, model=model.config)  # the embedded config wins
    trainer = Trainer(images, cfg, out_dir)
    trainer.model.load_state_dict(model.state_dict())
    trainer.resume_state(meta)
    return trainer.run()
