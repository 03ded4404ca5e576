"""Skip-interval attention: later clips attend to clip 1's cached temporal keys/values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import binfmt
from .denoiser import AttentionHooks
from .edm import DIRECTIONS, KINDS, ScheduleError, denoise, invert

CACHE_MAGIC = b"FFKVCACH"


class IncompleteCacheError(RuntimeError):
    pass


@dataclass
class KvCache:
    source_run: str  # inversion (training) | denoising (inference)
    sigmas: tuple  # noise level of each step of the source run
    entries: dict = field(default_factory=dict)  # (step, layer_id) -> (K, V), each (heads, L, d)

    @property
    def steps(self) -> int:
        return len(self.sigmas)

    def check_complete(self, temporal_sites) -> None:
        missing = [(s, site.layer_id) for s in range(self.steps) for site in temporal_sites
                   if (s, site.layer_id) not in self.entries]
        if missing:
            raise IncompleteCacheError(f"{len(missing)} cache entries missing, first {missing[0]}")

    def nearest_step(self, sigma: float) -> int:
        ls = np.log(np.asarray(self.sigmas))
        return int(np.argmin(np.abs(ls - math.log(sigma))))

    def write(self, path) -> None:
        w = binfmt.Writer(CACHE_MAGIC)
        w.u8(DIRECTIONS.index(self.source_run))
        w.u32(self.steps)
        for s in self.sigmas:
            w.f64(s)
        w.u32(len(self.entries))
        for (step, lid), (k, v) in sorted(self.entries.items()):
            if k.shape != v.shape:
                raise ValueError("cache file stores K and V with one shared shape header")
            w.u32(step)
            w.text(lid)
            w.u8(KINDS.index("temporal"))
            for d in k.shape:
                w.u32(d)
            w.payload(k)
            w.payload(v)
        w.save(path)

    @classmethod
    def read(cls, path) -> "KvCache":
        r = binfmt.Reader.open(path, CACHE_MAGIC)
        source = DIRECTIONS[r.u8()]
        steps = r.u32()
        sigmas = tuple(r.f64() for _ in range(steps))
        entries = {}
        for _ in range(r.u32()):
            step = r.u32()
            lid = r.text()
            kind = KINDS[r.u8()]
            if kind != "temporal":
                raise binfmt.FormatError(f"cache entry of kind {kind!r}")
            shape = (r.u32(), r.u32(), r.u32())
            entries[(step, lid)] = (r.payload(shape), r.payload(shape))
        r.expect_end()
        return cls(source, sigmas, entries)


def skip_attention(Qp, Kp, Vp, cached=None, scale=None):
    """Attention of the current clip's queries over ``[K'; K]`` and ``[V'; V]``.

    Returns ``(output, probabilities)`` with one softmax over the widened key axis.
    """
    Qp, Kp, Vp = (torch.as_tensor(t) for t in (Qp, Kp, Vp))
    if cached is not None and cached[0] is not None and cached[0].shape[-2] > 0:
        K, V = (torch.as_tensor(t) for t in cached)
        if K.shape[-1] != Kp.shape[-1] or V.shape[-1] != Vp.shape[-1]:
            raise ValueError(f"cached dims {K.shape[-1]}/{V.shape[-1]} vs current {Kp.shape[-1]}/{Vp.shape[-1]}")
        Ks, Vs = torch.cat([Kp, K], dim=-2), torch.cat([Vp, V], dim=-2)
    else:
        Ks, Vs = Kp, Vp
    if Qp.shape[-1] != Ks.shape[-1]:
        raise ValueError("query and key dims differ")
    if scale is None:
        scale = 1.0 / math.sqrt(Qp.shape[-1])
    probs = torch.softmax(Qp @ Ks.transpose(-1, -2) * scale, dim=-1)
    return probs @ Vs, probs


class KvRecorder(AttentionHooks):
    """Collects each temporal site's own post-projection K/V at every step."""

    def __init__(self, source_run: str, sigmas):
        self.cache = KvCache(source_run, tuple(float(s) for s in sigmas))

    def set_step(self, step, sigma):
        super().set_step(step, sigma)
        # keep the level the network actually saw (inversion evaluates one level down)
        sig = list(self.cache.sigmas)
        sig[step] = float(sigma)
        self.cache.sigmas = tuple(sig)

    def on_kv(self, site, k, v):
        b, nh, n, d = k.shape
        self.cache.entries[(self.step, site.layer_id)] = (
            k.detach().reshape(b * nh, n, d).numpy().copy(),
            v.detach().reshape(b * nh, n, d).numpy().copy(),
        )


class SkipInjector(AttentionHooks):
    """Concatenates cached clip-1 keys/values into temporal attention.

    In sampling the cache entry of the current step is used; in training the
    caller picks the step whose noise level is nearest via ``align_to_sigma``.
    """

    def __init__(self, cache: KvCache):
        self.cache = cache
        self._tensors = {}

    def align_to_sigma(self, sigma: float) -> None:
        self.step = self.cache.nearest_step(sigma)

    def _entry(self, step, layer_id):
        key = (step, layer_id)
        if key not in self._tensors:
            if key not in self.cache.entries:
                raise IncompleteCacheError(f"no cached K/V for step {step}, site {layer_id}")
            k, v = self.cache.entries[key]
            self._tensors[key] = (torch.from_numpy(k), torch.from_numpy(v))
        return self._tensors[key]

    def extend_kv(self, site, k, v):
        ck, cv = self._entry(self.step, site.layer_id)
        b, nh, n, d = k.shape
        per = ck.shape[0] // nh  # spatial positions in the cached clip
        if b % per:
            raise ValueError(f"cache holds {per} positions, current batch {b} is not a multiple")
        reps = b // per
        ck = ck.to(k.dtype).reshape(1, per, nh, -1, d).expand(reps, -1, -1, -1, -1).reshape(b, nh, -1, d)
        cv = cv.to(v.dtype).reshape(1, per, nh, -1, cv.shape[-1]).expand(reps, -1, -1, -1, -1).reshape(b, nh, -1, cv.shape[-1])
        return torch.cat([k, ck], dim=-2), torch.cat([v, cv], dim=-2)


def check_alignment(cache: KvCache, schedule) -> None:
    if cache.steps != schedule.steps:
        raise ScheduleError(f"cache has {cache.steps} steps, run has {schedule.steps}; not interpolated")


def capture_kv(model, z, cond, schedule, direction: str, adapters=None, hooks=None, record=True):
    """Run inversion or denoising while recording the temporal K/V at every step.

    Returns ``(latents, trace, cache)``.
    """
    rec = KvRecorder(direction, schedule.sigmas)
    from .denoiser import HookChain

    chain = HookChain(hooks, rec)
    run = invert if direction == "inversion" else denoise
    out, trace = run(model, z, cond, schedule, adapters=adapters, hooks=chain, record=record)
    rec.cache.check_complete(model.temporal_sites)
    return out, trace, rec.cache
