"""Low-rank adapters on temporal-attention projections and per-clip motion training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import binfmt
from .denoiser import PROJECTIONS, AdapterTargetError

log = logging.getLogger(__name__)

ADAPTER_MAGIC = b"FFLORA\x00\x00"


class TrainingDivergedError(RuntimeError):
    pass


class LoraAdapter(torch.nn.Module):
    """Update ``scale * B @ A`` for one projection; ``B`` starts at zero."""

    def __init__(self, target: tuple[str, str], d: int, k: int, rank: int, scale: float = 1.0,
                 generator: torch.Generator | None = None, init_std: float = 0.01):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        if target[1] not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        self.target = tuple(target)
        self.rank = rank
        self.scale = float(scale)
        self.A = torch.nn.Parameter(torch.randn(rank, k, generator=generator) * init_std)
        self.B = torch.nn.Parameter(torch.zeros(d, rank))

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)


class AdapterSet(dict):
    """Mapping ``(layer_id, projection) -> LoraAdapter``; ``history`` holds training losses."""

    history: list

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.history = []

    def parameters(self):
        for ad in self.values():
            yield from ad.parameters()

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for key in sorted(self):
            ad = self[key]
            h.update(repr((key, ad.rank, ad.scale)).encode())
            h.update(ad.A.detach().numpy().tobytes())
            h.update(ad.B.detach().numpy().tobytes())
        return h.hexdigest()


def apply_adapter(W0, adapter) -> np.ndarray:
    """Return ``W0 + scale * B @ A`` for a (d, k) weight."""
    W0 = np.asarray(W0)
    A = adapter.A.detach().numpy() if isinstance(adapter.A, torch.Tensor) else np.asarray(adapter.A)
    B = adapter.B.detach().numpy() if isinstance(adapter.B, torch.Tensor) else np.asarray(adapter.B)
    if B.shape[1] != A.shape[0] or (B.shape[0], A.shape[1]) != W0.shape:
        raise ValueError(f"shape mismatch: W0 {W0.shape}, B {B.shape}, A {A.shape}")
    return W0 + adapter.scale * (B @ A)


def init_adapters(model, rank: int = 8, scale: float = 1.0, seed: int = 0,
                  projections=PROJECTIONS) -> AdapterSet:
    g = torch.Generator().manual_seed(int(seed))
    out = AdapterSet()
    for target, lin in sorted(model.lora_targets.items()):
        if target[1] in projections:
            d, k = lin.weight.shape
            out[target] = LoraAdapter(target, d, k, rank, scale, generator=g)
    return out


@dataclass
class MotionTrainConfig:
    rank: int = 8
    steps: int = 250
    lr: float = 3e-3
    momentum: float = 0.9  # sgd only
    optimizer: str = "adam"
    batch: int = 1
    p_mean: float = 0.7
    p_std: float = 1.6
    sigma_cond: float = 0.02
    scale: float = 1.0
    seed: int = 0
    skip_interval_enabled: bool = True
    projections: tuple = PROJECTIONS

    def __post_init__(self):
        self.projections = tuple(self.projections)
        bad = [p for p in self.projections if p not in PROJECTIONS]
        if bad or not self.projections:
            raise ValueError(f"projections must be a non-empty subset of {PROJECTIONS}, got {bad}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


def train_motion_lora(clip, model, codec, cfg: MotionTrainConfig, skip_cache=None,
                      adapters: AdapterSet | None = None) -> AdapterSet:
    """Fit temporal-attention adapters so the frozen model reconstructs ``clip``.

    Each step draws a log-normal noise level, noises the clip latents, and
    regresses the clean latents given the clip's first frame as condition.
    With ``skip_cache`` the temporal attention also attends to the cached
    keys/values of the step whose noise level is nearest.
    """
    from .skip_interval import SkipInjector  # circular import guard

    frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float32)
    z0 = codec.encode(frames).z  # (L, C, h, w)
    cond_z = z0[0]
    with torch.no_grad():
        cond_tokens = model.embed_condition(torch.from_numpy(frames[:1]).permute(0, 3, 1, 2))
    model.requires_grad_(False)
    if adapters is None:
        adapters = init_adapters(model, cfg.rank, cfg.scale, seed=cfg.seed, projections=cfg.projections)
    params = list(adapters.parameters())
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    elif cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    hooks = SkipInjector(skip_cache) if (skip_cache is not None and cfg.skip_interval_enabled) else None
    g = torch.Generator().manual_seed(int(cfg.seed) + 1)
    b = cfg.batch
    zb = z0[None].expand(b, *z0.shape)
    for step in range(cfg.steps):
        n = torch.randn(b, generator=g)
        sigma = torch.exp(cfg.p_mean + cfg.p_std * n)
        noise = torch.randn(zb.shape, generator=g)
        c_sigma = cond_z[None] + cfg.sigma_cond * torch.randn((b, *cond_z.shape), generator=g)
        z_t = zb + sigma[:, None, None, None, None] * noise
        if hooks is not None:
            # batch members share one cache entry: the mean log-sigma picks it
            hooks.align_to_sigma(float(torch.exp(torch.log(sigma).mean())))
        pred = model(z_t, sigma, c_sigma, cond_tokens.expand(b, -1, -1), adapters=adapters, hooks=hooks)
        loss = (pred - zb).pow(2).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became {loss.item()} at step {step} (sigma={sigma.tolist()}); "
                f"last finite loss {adapters.history[-1] if adapters.history else 'n/a'}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        adapters.history.append(loss.item())
    for p in params:
        p.requires_grad_(False)
    return adapters


# -- persistence ---------------------------------------------------------

def save_adapters(adapters: AdapterSet, path) -> None:
    w = binfmt.Writer(ADAPTER_MAGIC)
    w.u32(len(adapters))
    for key in sorted(adapters):
        ad = adapters[key]
        w.text(ad.target[0])
        w.u8(PROJECTIONS.index(ad.target[1]))
        w.u32(ad.rank)
        w.f32(ad.scale)
        for mat in (ad.A, ad.B):
            arr = mat.detach().numpy()
            w.u32(arr.shape[0])
            w.u32(arr.shape[1])
            w.payload(arr)
    w.save(path)


def load_adapters(path, model=None) -> AdapterSet:
    """Read an adapter checkpoint; with ``model`` given, targets and shapes are validated."""
    r = binfmt.Reader.open(path, ADAPTER_MAGIC)
    out = AdapterSet()
    for _ in range(r.u32()):
        layer_id = r.text()
        proj = PROJECTIONS[r.u8()]
        rank = r.u32()
        scale = r.f32()
        mats = []
        for _ in range(2):
            shape = (r.u32(), r.u32())
            mats.append(torch.from_numpy(r.payload(shape).copy()))
        A, B = mats
        if A.shape[0] != rank or B.shape[1] != rank:
            raise binfmt.FormatError(f"rank {rank} does not match factor shapes {A.shape}, {B.shape}")
        ad = LoraAdapter((layer_id, proj), B.shape[0], A.shape[1], rank, scale)
        with torch.no_grad():
            ad.A.copy_(A)
            ad.B.copy_(B)
        ad.requires_grad_(False)
        out[(layer_id, proj)] = ad
    r.expect_end()
    if model is not None:
        targets = model.lora_targets
        for key, ad in out.items():
            if key not in targets:
                raise AdapterTargetError(f"adapter target {key} not present in model")
            if tuple(targets[key].weight.shape) != (ad.B.shape[0], ad.A.shape[1]):
                raise binfmt.FormatError(f"adapter {key} shape does not match model weight")
    return out


def adapter_payload_bytes(adapters: AdapterSet) -> int:
    """Checkpoint size implied by the shapes (header + per-adapter headers + payloads)."""
    size = 8 + 4 + 4
    for (layer_id, _), ad in adapters.items():
        size += 2 + len(layer_id.encode()) + 1 + 4 + 4
        size += 8 + 4 * ad.A.numel() + 8 + 4 * ad.B.numel()
    return size
