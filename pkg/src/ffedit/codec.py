"""Per-frame latent codec standing in for the frozen VAE.

Two codecs share one interface: :class:`ConvCodec`, a small strided
autoencoder trained once on the synthetic corpus, and :class:`PatchifyCodec`,
an exact space-to-depth map used where tests need exact arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binfmt

CODEC_MAGIC = b"FFCODEC\x00"


class CodecError(ValueError):
    pass


@dataclass
class LatentSeq:
    z: torch.Tensor  # (L, C, h, w)
    sigma: float = 0.0

    def __post_init__(self):
        if self.z.ndim != 4:
            raise ValueError(f"latents must be (L, C, h, w), got {tuple(self.z.shape)}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def shape(self):
        return tuple(self.z.shape)


def _as_tensor(frames) -> torch.Tensor:
    """(L, H, W, 3) array in [-1, 1] -> (L, 3, H, W) float tensor."""
    if isinstance(frames, torch.Tensor):
        t = frames
    else:
        t = torch.from_numpy(np.ascontiguousarray(getattr(frames, "frames", frames)))
    return t.float().permute(0, 3, 1, 2).contiguous()


class Codec(nn.Module):
    factor: int
    latent_channels: int

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def encode(self, clip) -> LatentSeq:
        x = _as_tensor(clip)
        _, _, h, w = x.shape
        if h % self.factor or w % self.factor:
            raise CodecError(f"frame size {h}x{w} not divisible by codec factor {self.factor}")
        return LatentSeq(self.encode_tensor(x), sigma=0.0)

    @torch.no_grad()
    def decode(self, z: LatentSeq) -> np.ndarray:
        if z.sigma != 0:
            raise CodecError(f"decode needs clean latents (sigma=0), got sigma={z.sigma}")
        x = self.decode_tensor(z.z).clamp(-1.0, 1.0)
        return x.permute(0, 2, 3, 1).contiguous().numpy()


class PatchifyCodec(Codec):
    """Space-to-depth: exact, invertible, no parameters."""

    def __init__(self, factor: int = 4):
        super().__init__()
        self.factor = factor
        self.latent_channels = 3 * factor * factor

    def encode_tensor(self, x):
        return F.pixel_unshuffle(x, self.factor)

    def decode_tensor(self, z):
        return F.pixel_shuffle(z, self.factor)


class ConvCodec(Codec):
    """Strided conv autoencoder, spatial factor 4, output scaled to unit std."""

    def __init__(self, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.factor = 4
        self.latent_channels = latent_channels
        self.width = width
        w = width
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * w, 2 * w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))
        # measured after training: reconstruction rel. L2 and max |z| on [-1, 1] inputs
        self.stats = {"recon_rel_l2": None, "max_abs_latent": None}

    def encode_tensor(self, x):
        return self.enc(x) / self.latent_scale

    def decode_tensor(self, z):
        return self.dec(z * self.latent_scale)

    def save(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"width": self.width, "stats": self.stats}
        binfmt.save_state(path, CODEC_MAGIC, meta, arrays, ints=(self.factor, self.latent_channels))

    @classmethod
    def load(cls, path) -> "ConvCodec":
        (factor, c_lat), meta, arrays = binfmt.load_state(path, CODEC_MAGIC, n_ints=2)
        if factor != 4:
            raise binfmt.FormatError(f"unsupported codec factor {factor}")
        codec = cls(latent_channels=c_lat, width=meta["width"])
        codec.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        codec.stats = meta.get("stats", codec.stats)
        codec.eval().requires_grad_(False)
        return codec


def train_codec(frames_fn, steps: int = 1500, batch: int = 32, lr: float = 2e-3,
                latent_channels: int = 4, width: int = 32, seed: int = 0, log=None) -> ConvCodec:
    """Fit a :class:`ConvCodec` on frames drawn from ``frames_fn(rng, n)``.

    ``frames_fn`` returns an (n, H, W, 3) array in [-1, 1]. After fitting, the
    latent scale is set so encodings have unit standard deviation.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    codec = ConvCodec(latent_channels, width)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for step in range(steps):
        x = _as_tensor(frames_fn(rng, batch))
        rec = codec.dec(codec.enc(x))
        loss = F.mse_loss(rec, x) + 0.5 * F.l1_loss(rec, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log and step % 200 == 0:
            log(f"codec step {step} loss {loss.item():.5f}")
    codec.eval().requires_grad_(False)
    with torch.no_grad():
        x = _as_tensor(frames_fn(rng, 256))
        z = codec.enc(x)
        codec.latent_scale.fill_(float(z.std()))
        z = codec.encode_tensor(x)
        rec = codec.decode_tensor(z).clamp(-1, 1)
        rel = float((rec - x).norm() / x.norm())
        extremes = torch.stack([-torch.ones(1, 3, 32, 32), torch.ones(1, 3, 32, 32)])[:, 0]
        zmax = max(float(z.abs().max()), float(codec.encode_tensor(extremes).abs().max()))
    codec.stats = {"recon_rel_l2": rel, "max_abs_latent": zmax}
    return codec
