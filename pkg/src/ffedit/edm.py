"""EDM noise schedule, deterministic Euler sampling and inversion, attention traces."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import binfmt
from .codec import LatentSeq
from .denoiser import AttentionHooks, HookChain

TRACE_MAGIC = b"FFTRACE\x00"
KINDS = ("spatial", "temporal", "cross")
DIRECTIONS = ("inversion", "denoising")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: tuple  # descending, length S; terminal 0 is implicit
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def steps(self) -> int:
        return len(self.sigmas)

    def with_terminal(self) -> np.ndarray:
        return np.append(np.asarray(self.sigmas, dtype=np.float64), 0.0)


def build_schedule(steps: int = 25, sigma_min: float = 0.002, sigma_max: float = 80.0,
                   rho: float = 7.0) -> NoiseSchedule:
    if steps < 2:
        raise ScheduleError("need at least 2 steps")
    if not 0 < sigma_min < sigma_max:
        raise ScheduleError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    i = np.arange(steps, dtype=np.float64)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sig = (hi + i / (steps - 1) * (lo - hi)) ** rho
    # pin endpoints: the power round-trip is not exact in floating point
    sig[0], sig[-1] = sigma_max, sigma_min
    return NoiseSchedule(tuple(float(s) for s in sig), sigma_min, sigma_max, rho)


@dataclass
class ConditioningBundle:
    cond_frame: np.ndarray  # (H, W, 3) in [-1, 1]
    c_sigma: torch.Tensor  # (C, h, w)
    cond_embedding: torch.Tensor  # (n_tokens, cond_dim)
    sigma_cond: float = 0.02


def make_conditioning(model, codec, frame, sigma_cond: float = 0.02, seed: int = 0) -> ConditioningBundle:
    """Encode the conditioning frame and add latent-domain noise of scale ``sigma_cond``."""
    frame = np.asarray(frame, dtype=np.float32)
    z = codec.encode(frame[None]).z[0]
    g = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(z.shape, generator=g, dtype=z.dtype)
    with torch.no_grad():
        pix = torch.from_numpy(frame).permute(2, 0, 1)[None]
        emb = model.embed_condition(pix)[0]
    return ConditioningBundle(frame, z + sigma_cond * eps, emb, sigma_cond)


@dataclass
class AttentionTrace:
    direction: str
    steps: int
    entries: dict = field(default_factory=dict)  # (step, layer_id, kind) -> (heads, q, k) float32

    def get(self, step: int, layer_id: str, kind: str) -> np.ndarray:
        return self.entries[(step, layer_id, kind)]

    def sites(self) -> list[tuple[str, str]]:
        return sorted({(lid, kind) for (_, lid, kind) in self.entries})

    def is_complete(self, sites) -> bool:
        want = {(s, site.layer_id, site.kind) for s in range(self.steps) for site in sites}
        return want <= set(self.entries)

    def payload_bytes(self) -> int:
        return sum(4 * a.size for a in self.entries.values())

    def write(self, path) -> None:
        w = binfmt.Writer(TRACE_MAGIC)
        w.u8(DIRECTIONS.index(self.direction))
        w.u32(self.steps)
        w.u32(len(self.entries))
        for (step, lid, kind), arr in sorted(self.entries.items()):
            w.u32(step)
            w.text(lid)
            w.u8(KINDS.index(kind))
            for d in arr.shape:
                w.u32(d)
            w.payload(arr)
        w.save(path)

    @classmethod
    def read(cls, path) -> "AttentionTrace":
        r = binfmt.Reader.open(path, TRACE_MAGIC)
        direction = DIRECTIONS[r.u8()]
        steps = r.u32()
        n = r.u32()
        entries = {}
        for _ in range(n):
            step = r.u32()
            lid = r.text()
            kind = KINDS[r.u8()]
            shape = (r.u32(), r.u32(), r.u32())
            entries[(step, lid, kind)] = r.payload(shape)
        r.expect_end()
        return cls(direction, steps, entries)


class TraceRecorder(AttentionHooks):
    """Stores the probabilities each instrumented site actually used."""

    def __init__(self, direction: str, steps: int, kinds=("spatial", "temporal")):
        self.trace = AttentionTrace(direction, steps)
        self.kinds = kinds

    def on_probs(self, site, probs):
        if site.kind in self.kinds:
            self.trace.entries[(self.step, site.layer_id, site.kind)] = (
                probs.detach().to(torch.float32).numpy().copy())
        return probs


def _call(model, z, sigma, cond: ConditioningBundle, adapters, hooks):
    with torch.no_grad():
        out = model(z.z[None] if isinstance(z, LatentSeq) else z[None],
                    torch.tensor([sigma], dtype=torch.float32),
                    cond.c_sigma[None], cond.cond_embedding[None],
                    adapters=adapters, hooks=hooks)
    return out[0]


def _hooks(record: bool, direction: str, steps: int, hooks):
    rec = TraceRecorder(direction, steps) if record else None
    chain = HookChain(hooks, rec) if (hooks is not None or rec is not None) else None
    return chain, rec


def denoise(model, z_T: LatentSeq, cond: ConditioningBundle, schedule: NoiseSchedule,
            adapters=None, hooks: AttentionHooks | None = None, record: bool = True):
    """Deterministic Euler probability-flow sampling from ``sigma_max`` to 0.

    Step ``i`` evaluates the denoiser at ``(z_i, sigma_i)`` and moves to
    ``sigma_{i+1}``; the final step lands on sigma = 0.
    """
    sig = schedule.with_terminal()
    if not np.isclose(z_T.sigma, sig[0], rtol=1e-6):
        raise ScheduleError(f"z_T.sigma={z_T.sigma} but schedule starts at {sig[0]}")
    chain, rec = _hooks(record, "denoising", schedule.steps, hooks)
    z = z_T.z.clone()
    for i in range(schedule.steps):
        if chain is not None:
            chain.set_step(i, float(sig[i]))
        x0 = _call(model, z, float(sig[i]), cond, adapters, chain)
        d = (z - x0) / float(sig[i])
        z = z + float(sig[i + 1] - sig[i]) * d
    return LatentSeq(z, 0.0), (rec.trace if rec else None)


def invert(model, z_0: LatentSeq, cond: ConditioningBundle, schedule: NoiseSchedule,
           adapters=None, hooks: AttentionHooks | None = None, record: bool = True):
    """Run the Euler ODE backwards from sigma = 0 to ``sigma_max``.

    Going from ``sigma_{i+1}`` up to ``sigma_i`` uses the derivative at the
    current point and its own level ``sigma_{i+1}``; the first step, which
    leaves sigma = 0, is evaluated at ``sigma_min``. The recorded attention of
    inversion step ``i`` is keyed by the same step index as denoising step ``i``.
    """
    if z_0.sigma != 0:
        raise ScheduleError(f"inversion starts from clean latents, got sigma={z_0.sigma}")
    sig = schedule.with_terminal()
    chain, rec = _hooks(record, "inversion", schedule.steps, hooks)
    z = z_0.z.clone()
    for i in reversed(range(schedule.steps)):
        level = float(sig[i + 1]) if sig[i + 1] > 0 else float(sig[i])
        if chain is not None:
            chain.set_step(i, level)
        x0 = _call(model, z, level, cond, adapters, chain)
        d = (z - x0) / level
        z = z + float(sig[i] - sig[i + 1]) * d
    return LatentSeq(z, float(sig[0])), (rec.trace if rec else None)


def sample_noise(shape, sigma_max: float, seed: int) -> LatentSeq:
    g = torch.Generator().manual_seed(int(seed))
    return LatentSeq(torch.randn(shape, generator=g) * sigma_max, float(sigma_max))


def relative_l2(a, b) -> float:
    a = a.z if isinstance(a, LatentSeq) else torch.as_tensor(np.asarray(a))
    b = b.z if isinstance(b, LatentSeq) else torch.as_tensor(np.asarray(b))
    return float((a - b).norm() / b.norm())
