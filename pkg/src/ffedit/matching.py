"""Fine-grained attention matching for the editing run.

Spatial self-attention of the edit run is blended with the stored source
attention, gated per query row by how much the two rows differ. Temporal
self-attention is replaced by the source maps according to a three-stage
schedule over denoising steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import AttentionHooks, AttentionSite
from .edm import ScheduleError

PRESETS = {"local": (0.5, 0.8), "style": (0.8, 0.9), "shape": (0.4, 0.5)}
REPLACE, KEEP = "replace", "keep"


@dataclass
class EditRunConfig:
    thr: float = 0.35
    beta1: float | None = None  # None -> taken from the preset
    beta2: float | None = None
    downscale_cutoff: int = 4
    preset: str = "local"
    steps: int = 25
    seed: int = 0
    spatial_matching: bool = True
    temporal_matching: bool = True
    head_average: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        b1, b2 = PRESETS[self.preset]
        if self.beta1 is None:
            self.beta1 = b1
        if self.beta2 is None:
            self.beta2 = b2
        if not 0 <= self.beta1 <= self.beta2 <= 1:
            raise ValueError(f"need 0 <= beta1 <= beta2 <= 1, got {self.beta1}, {self.beta2}")
        if not 0 <= self.thr <= 1:
            raise ValueError(f"thr must lie in [0, 1], got {self.thr}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def spatial_diff(a_src, a_edit):
    """Half the L1 distance between matching rows: ``sum_k |edit - src| / 2``.

    Maps of shape (..., queries, keys) give a (..., queries) map in [0, 1].
    """
    a_src, a_edit = _t(a_src), _t(a_edit)
    if a_src.shape != a_edit.shape:
        raise ValueError(f"attention shapes differ: {tuple(a_src.shape)} vs {tuple(a_edit.shape)}")
    return (a_edit - a_src).abs().sum(dim=-1) / 2


def match_weight(diff, thr: float):
    """1 where the difference exceeds ``thr``, the difference itself elsewhere."""
    return torch.where(diff > thr, torch.ones_like(diff), diff)


def spatial_match(a_src, a_edit, thr: float = 0.35, diff=None):
    """Blend ``M * a_edit + (1 - M) * a_src`` with ``M`` broadcast along each row."""
    a_src, a_edit = _t(a_src), _t(a_edit)
    if diff is None:
        diff = spatial_diff(a_src, a_edit)
    m = match_weight(diff, thr)[..., None]
    return a_edit * m + (1 - m) * a_src


def stage(step: int, total: int, cfg: EditRunConfig) -> int:
    """0, 1 or 2 for the half-open progress intervals [0, b1), [b1, b2), [b2, 1]."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    p = step / total
    if p < cfg.beta1:
        return 0
    if p < cfg.beta2:
        return 1
    return 2


def temporal_select(step: int, total: int, site, cfg: EditRunConfig) -> str:
    """``replace`` or ``keep`` for a temporal site at denoising step ``step`` (0 = noisiest)."""
    factor = site.downscale_factor if isinstance(site, AttentionSite) else int(site)
    st = stage(step, total, cfg)
    if st == 0:
        return REPLACE
    if st == 1:
        return REPLACE if factor >= cfg.downscale_cutoff else KEEP
    return KEEP


class AttentionMatcher(AttentionHooks):
    """Rewrites edit-run attention from a stored source trace.

    ``diff_log`` collects the spatial difference maps (per step and layer) when
    ``keep_diffs`` is set, for inspection and localization checks.
    """

    def __init__(self, src_trace, cfg: EditRunConfig, keep_diffs: bool = False):
        self.src = src_trace
        self.cfg = cfg
        self.keep_diffs = keep_diffs
        self.diff_log = {}
        self.actions = {}

    def _source(self, site, like):
        src = torch.from_numpy(self.src.get(self.step, site.layer_id, site.kind)).to(like.dtype)
        if src.shape != like.shape:
            raise ScheduleError(
                f"source map {tuple(src.shape)} vs edit map {tuple(like.shape)} at {site.layer_id}")
        return src

    def on_probs(self, site, probs):
        cfg = self.cfg
        if site.kind == "spatial" and cfg.spatial_matching:
            src = self._source(site, probs)
            diff = spatial_diff(src, probs)
            if cfg.head_average:
                h = site.head_count
                diff = diff.reshape(-1, h, diff.shape[-1]).mean(dim=1, keepdim=True)
                diff = diff.expand(-1, h, -1).reshape(-1, diff.shape[-1])
            if self.keep_diffs:
                self.diff_log[(self.step, site.layer_id)] = diff.numpy().copy()
            return spatial_match(src, probs, cfg.thr, diff=diff)
        if site.kind == "temporal" and cfg.temporal_matching:
            action = temporal_select(self.step, self.src.steps, site, cfg)
            self.actions[(self.step, site.layer_id)] = action
            if action == REPLACE:
                return self._source(site, probs)
        return probs


def make_controllers(src_trace, cfg: EditRunConfig, sites, schedule=None, keep_diffs=False) -> AttentionMatcher:
    """Validate that the source trace covers every site and step, then build the matcher."""
    steps = schedule.steps if schedule is not None else cfg.steps
    if src_trace.steps != steps:
        raise ScheduleError(f"source trace has {src_trace.steps} steps, edit run has {steps}")
    needed = [s for s in sites if (s.kind == "spatial" and cfg.spatial_matching)
              or (s.kind == "temporal" and cfg.temporal_matching)]
    if not src_trace.is_complete(needed):
        raise ScheduleError("source trace is missing entries for the edit run's sites")
    return AttentionMatcher(src_trace, cfg, keep_diffs=keep_diffs)
