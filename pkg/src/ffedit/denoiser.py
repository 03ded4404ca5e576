"""Compact temporal denoiser with instrumented attention.

The network maps noisy clip latents concatenated with noise-augmented
condition latents to a direct prediction of the clean latents. It is a
three-level U-Net over the latent grid; every level has a residual block,
spatial self-attention, temporal self-attention and cross-attention onto
tokens of the conditioning frame.

Attention sites call an optional hooks object in forward order::

    enc1.spatial, enc1.temporal, enc1.cross, enc2.*, mid.*, dec2.*, dec1.*

Spatial and temporal sites pass their probabilities through
``hooks.on_probs``; temporal sites additionally offer their keys/values to
``hooks.extend_kv`` before the softmax (used for skip-interval attention).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binfmt

MODEL_MAGIC = b"FFDENOIS"
PROJECTIONS = ("query", "key", "value", "output")


class AdapterTargetError(KeyError):
    pass


@dataclass(frozen=True)
class AttentionSite:
    layer_id: str
    kind: str  # spatial | temporal | cross
    downscale_factor: int
    head_count: int


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    width: int = 64
    channel_mult: tuple = (1, 2, 2)
    heads: int = 4
    cond_dim: int = 64
    sigma_data: float = 1.0
    frame_size: int = 32
    # "edm": D = c_skip * z + c_out * F; "none": D = F (the network output is the estimate)
    preconditioning: str = "edm"

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


def attention(q, k, v, scale=None):
    """Scaled dot-product attention returning ``(output, probabilities)``.

    Shapes are ``(..., n_q, d)``, ``(..., n_k, d)``, ``(..., n_k, d_v)``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    probs = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    return probs @ v, probs


class AttentionHooks:
    """No-op observer; subclasses record or rewrite attention.

    ``step`` and ``sigma`` are set by the sampler before each network call.
    """

    step: int = 0
    sigma: float = 0.0

    def set_step(self, step: int, sigma: float) -> None:
        self.step = step
        self.sigma = sigma

    def extend_kv(self, site: AttentionSite, k, v):
        return k, v

    def on_probs(self, site: AttentionSite, probs):
        return probs

    def on_kv(self, site: AttentionSite, k, v) -> None:
        """Called with the clip's own post-projection temporal keys/values."""


class HookChain(AttentionHooks):
    def __init__(self, *hooks):
        self.hooks = [h for h in hooks if h is not None]

    def set_step(self, step, sigma):
        super().set_step(step, sigma)
        for h in self.hooks:
            h.set_step(step, sigma)

    def extend_kv(self, site, k, v):
        for h in self.hooks:
            k, v = h.extend_kv(site, k, v)
        return k, v

    def on_kv(self, site, k, v):
        for h in self.hooks:
            h.on_kv(site, k, v)

    def on_probs(self, site, probs):
        for h in self.hooks:
            probs = h.on_probs(site, probs)
        return probs


@dataclass
class RunContext:
    adapters: dict | None
    hooks: AttentionHooks | None
    cond_tokens: torch.Tensor  # (B, n, cond_dim)
    frames: int


class LoraLinear(nn.Linear):
    """Linear layer whose weight can be offset by a low-rank adapter at call time."""

    def __init__(self, d_in, d_out, target, bias=True):
        super().__init__(d_in, d_out, bias=bias)
        self.target = target

    def forward(self, x, adapters=None):
        w = self.weight
        if adapters:
            ad = adapters.get(self.target)
            if ad is not None:
                w = w + ad.scale * (ad.B @ ad.A)
        return F.linear(x, w, self.bias)


def timestep_embedding(x, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype) / half)
    args = x[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        # x: (B*L, C, h, w); temb: (B*L, temb_dim)
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, site: AttentionSite, dim: int, lora: bool = False):
        super().__init__()
        self.site = site
        self.heads = site.head_count
        self.norm = nn.LayerNorm(dim)
        name = site.layer_id
        mk = (lambda p, bias=False: LoraLinear(dim, dim, (name, p), bias=bias)) if lora else (
            lambda p, bias=False: nn.Linear(dim, dim, bias=bias))
        self.to_q = mk("query")
        self.to_k = mk("key")
        self.to_v = mk("value")
        self.to_out = mk("output", True)
        self.lora = lora

    def _lin(self, layer, x, ctx):
        return layer(x, ctx.adapters) if self.lora else layer(x)

    def split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, tokens, ctx: RunContext):
        # tokens: (batch, n, dim); attention over n
        h = self.norm(tokens)
        q = self.split(self._lin(self.to_q, h, ctx))
        k = self.split(self._lin(self.to_k, h, ctx))
        v = self.split(self._lin(self.to_v, h, ctx))
        hooks = ctx.hooks
        if hooks is not None and self.site.kind == "temporal":
            hooks.on_kv(self.site, k, v)
            k, v = hooks.extend_kv(self.site, k, v)
        b, nh, n, d = q.shape
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        if hooks is not None:
            p = hooks.on_probs(self.site, probs.reshape(b * nh, n, k.shape[-2]))
            probs = p.reshape(b, nh, n, k.shape[-2])
        out = (probs @ v).transpose(1, 2).reshape(b, n, nh * d)
        return tokens + self._lin(self.to_out, out, ctx)


class CrossAttention(nn.Module):
    def __init__(self, site: AttentionSite, dim: int, cond_dim: int):
        super().__init__()
        self.site = site
        self.heads = site.head_count
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(cond_dim, dim, bias=False)
        self.to_v = nn.Linear(cond_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, tokens, cond):
        b, n, c = tokens.shape
        hd = c // self.heads
        q = self.to_q(self.norm(tokens)).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.to_k(cond).reshape(b, -1, self.heads, hd).transpose(1, 2)
        v = self.to_v(cond).reshape(b, -1, self.heads, hd).transpose(1, 2)
        out, _ = attention(q, k, v)
        return tokens + self.to_out(out.transpose(1, 2).reshape(b, n, c))


class Level(nn.Module):
    """Residual block + spatial, temporal and cross attention at one resolution."""

    def __init__(self, name, c_in, c_out, factor, heads, temb_dim, cond_dim):
        super().__init__()
        self.name = name
        self.res = ResBlock(c_in, c_out, temb_dim)
        self.sites = {
            kind: AttentionSite(f"{name}.{kind}", kind, factor, heads)
            for kind in ("spatial", "temporal", "cross")
        }
        self.spatial = SelfAttention(self.sites["spatial"], c_out)
        self.temporal = SelfAttention(self.sites["temporal"], c_out, lora=True)
        self.cross = CrossAttention(self.sites["cross"], c_out, cond_dim)
        self.frame_pos = nn.Linear(32, c_out)

    def forward(self, x, temb, ctx: RunContext):
        x = self.res(x, temb)
        bl, c, h, w = x.shape
        L = ctx.frames
        b = bl // L
        # spatial: tokens are positions within one frame
        t = x.reshape(bl, c, h * w).transpose(1, 2)
        t = self.spatial(t, ctx)
        # temporal: tokens are frames at one position
        t = t.reshape(b, L, h * w, c).transpose(1, 2).reshape(b * h * w, L, c)
        pos = timestep_embedding(torch.arange(L, dtype=x.dtype), 32)
        t = t + self.frame_pos(pos)[None]
        t = self.temporal(t, ctx)
        t = t.reshape(b, h * w, L, c).transpose(1, 2).reshape(bl, h * w, c)
        cond = ctx.cond_tokens.repeat_interleave(L, dim=0)
        t = self.cross(t, cond)
        return t.transpose(1, 2).reshape(bl, c, h, w)


class CondEncoder(nn.Module):
    """Conditioning frame (pixels) -> 16 tokens; stands in for an image embedding."""

    def __init__(self, cond_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, cond_dim, 4, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(4),
        )

    def forward(self, frame):
        # frame: (B, 3, H, W)
        return self.net(frame).flatten(2).transpose(1, 2)


class DenoiserNet(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        w = cfg.width
        c1, c2, c3 = (w * m for m in cfg.channel_mult)
        temb_dim = 2 * w
        self.temb_mlp = nn.Sequential(nn.Linear(64, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.cond_encoder = CondEncoder(cfg.cond_dim)
        self.conv_in = nn.Conv2d(2 * cfg.latent_channels, c1, 3, padding=1)
        args = (cfg.heads, temb_dim, cfg.cond_dim)
        self.enc1 = Level("enc1", c1, c1, 1, *args)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = Level("enc2", c1, c2, 2, *args)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = Level("mid", c2, c3, 4, *args)
        self.dec2 = Level("dec2", c3 + c2, c2, 2, *args)
        self.dec1 = Level("dec1", c2 + c1, c1, 1, *args)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)
        self.levels = [self.enc1, self.enc2, self.mid, self.dec2, self.dec1]

    # -- introspection -------------------------------------------------
    @property
    def sites(self) -> list[AttentionSite]:
        return [lv.sites[k] for lv in self.levels for k in ("spatial", "temporal", "cross")]

    @property
    def instrumented_sites(self) -> list[AttentionSite]:
        return [s for s in self.sites if s.kind in ("spatial", "temporal")]

    @property
    def temporal_sites(self) -> list[AttentionSite]:
        return [s for s in self.sites if s.kind == "temporal"]

    @property
    def lora_targets(self) -> dict[tuple[str, str], LoraLinear]:
        out = {}
        for m in self.modules():
            if isinstance(m, LoraLinear):
                out[m.target] = m
        return out

    def base_parameters(self):
        return list(self.parameters())

    # -- forward -------------------------------------------------------
    def embed_condition(self, frame: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pixels -> (B, 16, cond_dim) tokens."""
        return self.cond_encoder(frame)

    def forward(self, z_t, sigma, c_sigma, cond_tokens, adapters=None, hooks=None):
        """Predict clean latents.

        z_t: (B, L, C, h, w) noisy latents; sigma: scalar or (B,) noise level;
        c_sigma: (B, C, h, w) condition latents, broadcast over frames;
        cond_tokens: (B, n, cond_dim).
        """
        if z_t.ndim != 5:
            raise ValueError(f"z_t must be (B, L, C, h, w), got {tuple(z_t.shape)}")
        b, L, c, h, w = z_t.shape
        if c != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, got {c}")
        if c_sigma.shape != (b, c, h, w):
            raise ValueError(f"condition latents {tuple(c_sigma.shape)} do not match {(b, c, h, w)}")
        if h % 4 or w % 4:
            raise ValueError("latent grid must be divisible by 4")
        if adapters:
            unknown = set(adapters) - set(self.lora_targets)
            if unknown:
                raise AdapterTargetError(f"unknown adapter targets: {sorted(unknown)}")
        sigma = torch.as_tensor(sigma, dtype=z_t.dtype).reshape(-1).expand(b)
        if torch.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        sd = self.config.sigma_data
        c_in = 1.0 / torch.sqrt(sigma ** 2 + sd ** 2)
        x = torch.cat([z_t * c_in[:, None, None, None, None],
                       c_sigma[:, None].expand(b, L, c, h, w)], dim=2)
        x = x.reshape(b * L, 2 * c, h, w)
        temb = self.temb_mlp(timestep_embedding(torch.log(sigma) / 4, 64))
        temb = temb.repeat_interleave(L, dim=0)
        ctx = RunContext(adapters, hooks, cond_tokens, L)

        x = self.conv_in(x)
        s1 = self.enc1(x, temb, ctx)
        s2 = self.enc2(self.down1(s1), temb, ctx)
        m = self.mid(self.down2(s2), temb, ctx)
        u = F.interpolate(m, scale_factor=2, mode="nearest")
        u = self.dec2(torch.cat([u, s2], dim=1), temb, ctx)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.dec1(torch.cat([u, s1], dim=1), temb, ctx)
        out = self.conv_out(F.silu(self.norm_out(u))).reshape(b, L, c, h, w)
        if self.config.preconditioning == "none":
            return out
        c_skip = sd ** 2 / (sigma ** 2 + sd ** 2)
        c_out = sigma * sd * c_in
        bc = (slice(None), None, None, None, None)
        return c_skip[bc] * z_t + c_out[bc] * out

    # -- persistence ---------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        binfmt.save_state(path, MODEL_MAGIC, {"config": self.config.to_dict(), **(meta or {})}, arrays)

    @classmethod
    def load(cls, path) -> "DenoiserNet":
        _, meta, arrays = binfmt.load_state(path, MODEL_MAGIC)
        cfg = meta["config"]
        cfg["channel_mult"] = tuple(cfg["channel_mult"])
        net = cls(DenoiserConfig(**cfg))
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        net.eval().requires_grad_(False)
        net.meta = meta
        return net


def parameter_digest(net: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in net.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
