"""One-time pre-training of the codec and base denoiser on the synthetic corpus."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .codec import ConvCodec, _as_tensor, train_codec
from .denoiser import DenoiserConfig, DenoiserNet
from .synthetic import gen_synthetic, random_config

log = logging.getLogger(__name__)

WEIGHTS_DIR = Path(__file__).parent / "weights"


@dataclass
class BaseTrainConfig:
    steps: int = 6000
    batch: int = 8
    frames: int = 14
    size: int = 32
    lr: float = 3e-4
    p_mean: float = -0.6
    p_std: float = 1.6
    sigma_cond: float = 0.02
    max_weight: float = 1e4
    ema_decay: float = 0.999
    codec_steps: int = 6000
    width: int = 64
    seed: int = 0


def _random_frames(size):
    def fn(rng, n):
        out = []
        for _ in range(n):
            out.append(gen_synthetic(random_config(rng, frames=1, size=size)).frames[0])
        return np.stack(out)
    return fn


def random_clips(rng, batch, frames, size):
    return np.stack([gen_synthetic(random_config(rng, frames=frames, size=size)).frames
                     for _ in range(batch)])


def denoising_loss(model, z0, c_sigma, cond_tokens, sigma, noise, adapters=None, hooks=None,
                   weight=None):
    """Mean squared error between clean latents and the network's prediction."""
    z_t = z0 + sigma[:, None, None, None, None] * noise
    pred = model(z_t, sigma, c_sigma, cond_tokens, adapters=adapters, hooks=hooks)
    err = (pred - z0).pow(2).mean(dim=(1, 2, 3, 4))
    if weight is not None:
        err = err * weight
    return err.mean()


def train_base(cfg: BaseTrainConfig, out_dir=WEIGHTS_DIR, codec: ConvCodec | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if codec is None:
        t0 = time.time()
        codec = train_codec(_random_frames(cfg.size), steps=cfg.codec_steps, seed=cfg.seed, log=log.info)
        codec.save(out_dir / "codec.bin")
        log.info("codec trained in %.0fs, stats %s", time.time() - t0, codec.stats)

    model = DenoiserNet(DenoiserConfig(width=cfg.width, frame_size=cfg.size))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    warm = 200
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warm) * 0.5 * (1 + math.cos(math.pi * min(s, cfg.steps) / cfg.steps)))
    averaged = torch.optim.swa_utils.AveragedModel(
        model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(cfg.ema_decay))
    t0 = time.time()
    ema = None
    for step in range(cfg.steps):
        clips = random_clips(rng, cfg.batch, cfg.frames, cfg.size)
        with torch.no_grad():
            flat = _as_tensor(clips.reshape(-1, cfg.size, cfg.size, 3))
            z0 = codec.encode_tensor(flat).reshape(cfg.batch, cfg.frames, -1, cfg.size // 4, cfg.size // 4)
            c_sigma = z0[:, 0] + cfg.sigma_cond * torch.randn_like(z0[:, 0])
        cond_tokens = model.embed_condition(_as_tensor(clips[:, 0]))
        sigma = torch.exp(cfg.p_mean + cfg.p_std * torch.randn(cfg.batch))
        weight = torch.clamp((sigma ** 2 + 1) / sigma ** 2, max=cfg.max_weight)
        loss = denoising_loss(model, z0, c_sigma, cond_tokens, sigma, torch.randn_like(z0), weight=weight)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        averaged.update_parameters(model)
        ema = loss.item() if ema is None else 0.98 * ema + 0.02 * loss.item()
        if step % 100 == 0:
            log.info("step %d loss %.4f (ema %.4f) %.1fs", step, loss.item(), ema, time.time() - t0)
        if step % 1000 == 999:
            averaged.module.save(out_dir / "denoiser.bin", {"train": vars(cfg), "step": step + 1})
    model = averaged.module.eval().requires_grad_(False)
    model.save(out_dir / "denoiser.bin", {"train": vars(cfg), "step": cfg.steps})
    return codec, model


def load_desk_model(weights_dir=WEIGHTS_DIR):
    """Load the shipped (or locally trained) codec and denoiser."""
    weights_dir = Path(weights_dir)
    codec = ConvCodec.load(weights_dir / "codec.bin")
    model = DenoiserNet.load(weights_dir / "denoiser.bin")
    return codec, model
