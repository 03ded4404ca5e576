"""Two-stage editing: per-clip motion adapters, then attention-matched re-generation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import JobSettings
from .denoiser import HookChain
from .edm import build_schedule, denoise, invert, make_conditioning
from .lora import load_adapters, save_adapters, train_motion_lora
from .matching import make_controllers
from .media_io import ClipPlan, FrameClip, segment_clips, write_frame_dir
from .rng import derive_seed
from .sarp import SarpConfig, detect_smooth, perturb, perturb_latent
from .skip_interval import KvCache, KvRecorder, SkipInjector, capture_kv, check_alignment

log = logging.getLogger(__name__)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class EditJob:
    source: np.ndarray  # (N, H, W, 3) source video
    edited_first_frame: np.ndarray  # (H, W, 3)
    settings: JobSettings = field(default_factory=JobSettings)
    out_dir: Path | None = None
    plan: ClipPlan | None = None

    def __post_init__(self):
        self.source = np.asarray(self.source, np.float32)
        self.edited_first_frame = np.asarray(self.edited_first_frame, np.float32)
        if self.edited_first_frame.shape != self.source.shape[1:]:
            raise ValueError(f"edited frame {self.edited_first_frame.shape} does not match "
                             f"source frames {self.source.shape[1:]}")
        if self.plan is None:
            self.plan = segment_clips(len(self.source), self.settings.clip_length)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)

    @property
    def clips(self) -> list[FrameClip]:
        return self.plan.split(self.source)

    def seed(self, *labels) -> int:
        return derive_seed(self.settings.seed, *labels)

    def path(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name


class Manifest:
    """JSON record of config, seeds and artifact digests; lets stage 1 resume."""

    def __init__(self, job: EditJob):
        self.job = job
        self.data = {"config": job.settings.to_dict(), "plan": job.plan.to_dict(), "artifacts": {}}
        self.data["config_hash"] = hashlib.sha256(
            json.dumps(self.data["config"], sort_keys=True).encode()).hexdigest()
        prev = job.path("manifest.json")
        if prev is not None and prev.exists():
            old = json.loads(prev.read_text())
            if old.get("config_hash") == self.data["config_hash"]:
                self.data["artifacts"] = old.get("artifacts", {})

    def record(self, name: str, path: Path) -> None:
        self.data["artifacts"][name] = {"path": path.name, "sha256": file_digest(path)}
        self.flush()

    def valid(self, name: str) -> Path | None:
        entry = self.data["artifacts"].get(name)
        if not entry or self.job.out_dir is None:
            return None
        p = self.job.out_dir / entry["path"]
        if p.exists() and file_digest(p) == entry["sha256"]:
            return p
        return None

    def flush(self) -> None:
        p = self.job.path("manifest.json")
        if p is not None:
            p.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _cond(job, model, codec, frame, *labels):
    return make_conditioning(model, codec, frame, job.settings.sigma_cond, seed=job.seed("cond", *labels))


def coarse_motion_extraction(job: EditJob, model, codec, manifest: Manifest | None = None):
    """Train one adapter set per clip; clips after the first attend to clip 1's inversion K/V.

    Returns ``(adapter_sets, training_cache)``; the cache is None for a single clip.
    """
    s = job.settings
    manifest = manifest or Manifest(job)
    schedule = build_schedule(s.edit.steps)
    clips = job.clips
    cache = None
    if len(clips) > 1 and s.skip_interval:
        p = manifest.valid("train_cache")
        if p is not None:
            cache = KvCache.read(p)
        else:
            z0 = codec.encode(clips[0])
            cond = _cond(job, model, codec, clips[0].frames[0], "train", 1)
            _, _, cache = capture_kv(model, z0, cond, schedule, "inversion", record=False)
            p = job.path("cache_train.bin")
            if p is not None:
                cache.write(p)
                manifest.record("train_cache", p)
    adapter_sets = []
    for i, clip in enumerate(clips, start=1):
        name = f"adapters_{i:03d}"
        p = manifest.valid(name)
        if p is not None:
            adapter_sets.append(load_adapters(p, model))
            continue
        cfg = _lora_cfg(s, job.seed("lora", i))
        ads = train_motion_lora(clip, model, codec, cfg, skip_cache=cache if i > 1 else None)
        log.info("clip %d adapters: loss %.4f -> %.4f", i,
                 ads.history[0] if ads.history else float("nan"),
                 ads.history[-1] if ads.history else float("nan"))
        adapter_sets.append(ads)
        p = job.path(f"{name}.bin")
        if p is not None:
            save_adapters(ads, p)
            manifest.record(name, p)
    return adapter_sets, cache


def _lora_cfg(s: JobSettings, seed: int):
    from dataclasses import replace

    return replace(s.lora, seed=seed, skip_interval_enabled=s.skip_interval)


def appearance_refinement(job: EditJob, model, codec, adapter_sets, train_cache=None,
                          manifest: Manifest | None = None, keep_diffs: bool = False):
    """Invert each (perturbed) source clip, then re-generate it from the edited condition.

    Returns the edited video as an (N, H, W, 3) array; per-clip diagnostics are
    stored on ``job.diagnostics``.
    """
    s = job.settings
    manifest = manifest or Manifest(job)
    schedule = build_schedule(s.edit.steps)
    clips = job.clips
    if len(adapter_sets) != len(clips):
        raise ValueError(f"{len(adapter_sets)} adapter sets for {len(clips)} clips")
    sic = s.skip_interval and len(clips) > 1
    if sic and train_cache is not None:
        check_alignment(train_cache, schedule)
    outputs = []
    infer_cache = None
    cond_frame = job.edited_first_frame
    job.diagnostics = []
    for i, clip in enumerate(clips, start=1):
        adapters = adapter_sets[i - 1] or None
        sarp = SarpConfig(s.sarp.alpha, s.sarp.gradient_threshold, s.sarp.mode,
                          job.seed("sarp", i), s.sarp.latent_alpha)
        mask = detect_smooth(clip, sarp.gradient_threshold)
        z0 = codec.encode(perturb(clip, mask, sarp))
        if sarp.mode == "latent":
            z0 = perturb_latent(z0, sarp)
        src_cond = _cond(job, model, codec, clip.frames[0], "src", i)
        inv_hooks = SkipInjector(train_cache) if (sic and i > 1 and train_cache is not None) else None
        z_T, src_trace = invert(model, z0, src_cond, schedule, adapters=adapters, hooks=inv_hooks)
        p = job.path(f"trace_src_{i:03d}.bin") if s.save_traces else None
        if p is not None:
            src_trace.write(p)
            manifest.record(f"trace_src_{i:03d}", p)

        edit_cond = _cond(job, model, codec, cond_frame, "edit", i)
        matcher = None
        if s.edit.spatial_matching or s.edit.temporal_matching:
            matcher = make_controllers(src_trace, s.edit, model.instrumented_sites, schedule,
                                       keep_diffs=keep_diffs)
        recorder = None
        injector = None
        if sic and i == 1:
            recorder = KvRecorder("denoising", schedule.sigmas)
        elif sic:
            injector = SkipInjector(infer_cache)
        hooks = HookChain(injector, matcher, recorder)
        z_edit, edit_trace = denoise(model, z_T, edit_cond, schedule, adapters=adapters, hooks=hooks,
                                     record=s.save_traces)
        if recorder is not None:
            infer_cache = recorder.cache
            infer_cache.check_complete(model.temporal_sites)
            check_alignment(infer_cache, schedule)
            p = job.path("cache_infer.bin")
            if p is not None:
                infer_cache.write(p)
                manifest.record("infer_cache", p)
        frames = codec.decode(z_edit)
        outputs.append(frames)
        job.diagnostics.append({"clip": i, "z_T": z_T, "matcher": matcher, "cond_frame": cond_frame})
        # next clip is conditioned on the last generated frame
        cond_frame = frames[-1]
    video = job.plan.assemble(outputs)
    out = job.path("output")
    if out is not None:
        write_frame_dir(video, out, plan=job.plan)
        manifest.record("output_frames", out / "frame_000001.png")
        manifest.data["artifacts"]["output_digest"] = hashlib.sha256(video.tobytes()).hexdigest()
        manifest.flush()
    return video


def run_job(job: EditJob, model, codec):
    """Both stages with a shared manifest; returns (video, adapter_sets)."""
    manifest = Manifest(job)
    adapter_sets, cache = coarse_motion_extraction(job, model, codec, manifest)
    video = appearance_refinement(job, model, codec, adapter_sets, cache, manifest)
    return video, adapter_sets


def generate_clip(model, codec, cond_frame, frames: int, schedule, seed: int, adapters=None,
                  hooks=None, sigma_cond: float = 0.02, cond_seed: int = 0):
    """Plain conditional generation from seeded noise (no inversion, no matching)."""
    from .edm import sample_noise

    cond = make_conditioning(model, codec, cond_frame, sigma_cond, seed=cond_seed)
    c, h, w = cond.c_sigma.shape
    z_T = sample_noise((frames, c, h, w), schedule.sigmas[0], seed)
    z0, _ = denoise(model, z_T, cond, schedule, adapters=adapters, hooks=hooks, record=False)
    return codec.decode(z0)
