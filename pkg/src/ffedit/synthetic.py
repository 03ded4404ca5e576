"""Synthetic moving-shape videos with ground-truth masks and centroid tracks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .media_io import write_frame_dir

SHAPES = ("square", "circle", "triangle")


@dataclass
class ShapeSpec:
    kind: str = "square"
    size: float = 8.0  # side / diameter in pixels
    color: tuple = (-0.8, -0.2, 0.6)  # RGB in [-1, 1]
    start: tuple = (8.0, 16.0)  # centre (x, y) in pixels
    velocity: tuple = (1.0, 0.0)  # pixels per frame
    spin: float = 0.0  # radians per frame


@dataclass
class SynthConfig:
    frames: int = 14
    height: int = 32
    width: int = 32
    background: tuple = (1.0, 1.0, 1.0)
    shapes: list = field(default_factory=lambda: [ShapeSpec()])
    bounce: bool = True
    factor: int = 4  # codec factor the dimensions must divide


@dataclass
class SynthVideo:
    frames: np.ndarray  # (N, H, W, 3)
    masks: np.ndarray  # (N, n_shapes, H, W) bool
    tracks: np.ndarray  # (N, n_shapes, 2) centroid (x, y) of each mask
    track: np.ndarray  # (N, 2) centroid of the union mask
    config: SynthConfig

    @property
    def foreground(self) -> np.ndarray:
        return self.masks.any(axis=1)


def _reflect(p, lo, hi):
    span = hi - lo
    if span <= 0:
        return np.full_like(p, (lo + hi) / 2)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def _inside(kind, xs, ys, cx, cy, size, angle):
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(-angle), np.sin(-angle)
    u, v = c * dx - s * dy, s * dx + c * dy
    r = size / 2
    if kind == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "triangle":
        # apex up, base at v = +r/√3·..; an equilateral-ish triangle inside the box
        return (v <= r) & (v >= -r) & (np.abs(u) <= (v + r) / 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def centroid(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return np.array([np.nan, np.nan])
    return np.array([xs.mean() + 0.5, ys.mean() + 0.5])


def gen_synthetic(cfg: SynthConfig) -> SynthVideo:
    """Render shapes translating (and optionally spinning) over a constant background.

    Edges are hard: a pixel belongs to a shape when its centre lies inside it,
    so tracks computed from the masks match background keying exactly.
    """
    if cfg.height % cfg.factor or cfg.width % cfg.factor or cfg.height <= 0 or cfg.width <= 0:
        raise ValueError(f"frame size {cfg.height}x{cfg.width} must be positive multiples of {cfg.factor}")
    if cfg.frames < 1:
        raise ValueError("need at least one frame")
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64) + 0.5
    n, k = cfg.frames, len(cfg.shapes)
    frames = np.empty((n, cfg.height, cfg.width, 3), np.float32)
    frames[:] = np.asarray(cfg.background, np.float32)
    masks = np.zeros((n, k, cfg.height, cfg.width), bool)
    t = np.arange(n, dtype=np.float64)
    for j, sh in enumerate(cfg.shapes):
        r = sh.size / 2
        px = sh.start[0] + sh.velocity[0] * t
        py = sh.start[1] + sh.velocity[1] * t
        if cfg.bounce:
            px = _reflect(px, r, cfg.width - r)
            py = _reflect(py, r, cfg.height - r)
        for i in range(n):
            m = _inside(sh.kind, xs, ys, px[i], py[i], sh.size, sh.spin * i)
            masks[i, j] = m
            frames[i][m] = np.asarray(sh.color, np.float32)
    # later shapes occlude earlier ones
    for j in range(k - 1):
        masks[:, j] &= ~masks[:, j + 1:].any(axis=1)
    tracks = np.stack([[centroid(masks[i, j]) for j in range(k)] for i in range(n)])
    track = np.stack([centroid(masks[i].any(axis=0)) for i in range(n)])
    return SynthVideo(frames, masks, tracks, track, cfg)


def random_config(rng: np.random.Generator, frames: int = 14, size: int = 32,
                  max_shapes: int = 2, max_speed: float = 1.2, white_prob: float = 0.5) -> SynthConfig:
    """Draw a random scene; background is white with probability ``white_prob``."""
    if rng.random() < white_prob:
        bg = np.ones(3)
    else:
        bg = rng.uniform(-1, 1, 3)
    shapes = []
    for _ in range(rng.integers(1, max_shapes + 1)):
        while True:
            color = rng.uniform(-1, 1, 3)
            if np.abs(color - bg).max() > 0.6:
                break
        sz = float(rng.integers(6, 13))
        vel = rng.uniform(-max_speed, max_speed, 2)
        start = rng.uniform(sz / 2, size - sz / 2, 2)
        kind = SHAPES[rng.integers(len(SHAPES))]
        shapes.append(ShapeSpec(kind, sz, tuple(color), tuple(start), tuple(vel), 0.0))
    return SynthConfig(frames, size, size, tuple(bg), shapes)


def write_synthetic(video: SynthVideo, path) -> None:
    """Frames as a frame directory plus ``ground_truth.npz`` (masks, tracks)."""
    path = Path(path)
    cfg = asdict(video.config)
    write_frame_dir(video.frames, path, extra={"synthetic": cfg})
    np.savez_compressed(path / "ground_truth.npz", masks=video.masks, tracks=video.tracks,
                        track=video.track, background=np.asarray(video.config.background))


def load_ground_truth(path) -> dict:
    with np.load(Path(path) / "ground_truth.npz") as data:
        return {k: data[k] for k in data.files}


def config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    d["shapes"] = [ShapeSpec(**{**s, "color": tuple(s["color"]), "start": tuple(s["start"]),
                                "velocity": tuple(s["velocity"])}) for s in d.get("shapes", [])]
    d["background"] = tuple(d.get("background", (1.0, 1.0, 1.0)))
    return SynthConfig(**d)


def dumps_config(cfg: SynthConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
