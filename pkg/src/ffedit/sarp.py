"""Smooth-area detection, random perturbation before inversion, and normality diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from scipy.special import log_ndtr

from .codec import LatentSeq
from .edm import invert, make_conditioning

MODES = ("off", "smooth", "non_smooth", "latent")
# noise scales that gave good results in the source ablation; outside is allowed but warned
ALPHA_ADVISORY = (0.0005, 0.005)


@dataclass
class SarpConfig:
    alpha: float = 0.005
    gradient_threshold: float = 0.001
    mode: str = "smooth"
    seed: int = 0
    latent_alpha: float = 0.02

    def __post_init__(self):
        if self.alpha < 0 or self.latent_alpha < 0:
            raise ValueError("noise scales must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha and not ALPHA_ADVISORY[0] <= self.alpha <= ALPHA_ADVISORY[1]:
            warnings.warn(f"SARP alpha={self.alpha} outside the usual range {ALPHA_ADVISORY}", stacklevel=2)


def _frames(clip) -> np.ndarray:
    arr = np.asarray(getattr(clip, "frames", clip), dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (L, H, W, 3) frames, got {arr.shape}")
    return arr


def luminance(frames: np.ndarray) -> np.ndarray:
    """Mean of RGB after mapping [-1, 1] to [0, 1]."""
    return ((frames + 1.0) / 2.0).mean(axis=-1)


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """Per-frame 3x3 Sobel gradient magnitude with replicate borders; gray is (L, H, W)."""
    gx = ndimage.sobel(gray, axis=2, mode="nearest")
    gy = ndimage.sobel(gray, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def detect_smooth(clip, threshold: float = 0.001) -> np.ndarray:
    """Binary (L, H, W) mask, 1 where the luminance gradient magnitude is <= threshold."""
    return (sobel_magnitude(luminance(_frames(clip))) <= threshold).astype(np.uint8)


def perturbation_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def perturb(clip, mask: np.ndarray, cfg: SarpConfig) -> np.ndarray:
    """Add ``alpha * eps`` inside the mode's region; leave every other pixel untouched."""
    x = _frames(clip)
    mask = np.asarray(mask)
    if mask.shape != x.shape[:3]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {x.shape[:3]}")
    if cfg.mode in ("off", "latent") or cfg.alpha == 0:
        return x.copy()
    region = mask.astype(bool) if cfg.mode == "smooth" else ~mask.astype(bool)
    eps = perturbation_noise(x.shape, cfg.seed)
    noisy = np.clip(x + np.float32(cfg.alpha) * eps, -1.0, 1.0)
    return np.where(region[..., None], noisy, x)


def perturb_latent(z: LatentSeq, cfg: SarpConfig) -> LatentSeq:
    """Latent-domain variant: add ``latent_alpha * eps`` to every latent entry."""
    g = torch.Generator().manual_seed(int(cfg.seed))
    eps = torch.randn(z.z.shape, generator=g, dtype=z.z.dtype)
    return LatentSeq(z.z + cfg.latent_alpha * eps, z.sigma)


def anderson_statistic(samples) -> float:
    """Anderson-Darling normality statistic with estimated mean and variance.

    Returns the small-sample corrected ``A2 * (1 + 4/n - 25/n**2)``.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < 8:
        raise ValueError(f"need at least 8 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    sd = x.std(ddof=1)
    if sd == 0:
        raise ValueError("zero variance: samples are constant")
    w = (x - x.mean()) / sd
    i = np.arange(1, n + 1)
    s = np.sum((2 * i - 1) * (log_ndtr(w) + log_ndtr(-w[::-1]))) / n
    a2 = -n - s
    return float(a2 * (1 + 4 / n - 25 / n ** 2))


def invert_clip(clip, model, codec, schedule, cfg: SarpConfig, adapters=None, sigma_cond=0.02,
                cond_seed=0):
    """Perturb per ``cfg``, encode, and invert; returns the inverted latent and trace."""
    frames = _frames(clip)
    mask = detect_smooth(frames, cfg.gradient_threshold)
    z0 = codec.encode(perturb(frames, mask, cfg))
    if cfg.mode == "latent":
        z0 = perturb_latent(z0, cfg)
    cond = make_conditioning(model, codec, frames[0], sigma_cond, seed=cond_seed)
    return invert(model, z0, cond, schedule, adapters=adapters, record=False)


def sarp_report(clip, schedule, model, codec, cfg: SarpConfig, modes=("off", "smooth")) -> dict:
    """A*^2 of the inverted latents for each requested perturbation mode."""
    out = {}
    for mode in modes:
        mcfg = SarpConfig(cfg.alpha, cfg.gradient_threshold, mode, cfg.seed, cfg.latent_alpha)
        zT, _ = invert_clip(clip, model, codec, schedule, mcfg)
        vals = zT.z.numpy().ravel()
        out[mode] = (anderson_statistic(vals), vals.size)
    return out


def format_report(report: dict, meta: dict | None = None) -> str:
    lines = [f"# {k}: {v}" for k, v in (meta or {}).items()]
    lines += [f"{mode} {a2:.6f} {n}" for mode, (a2, n) in report.items()]
    return "\n".join(lines) + "\n"
