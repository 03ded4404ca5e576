"""Frame directories, pixel normalization, and clip segmentation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
MANIFEST_NAME = "manifest.json"


class MediaError(Exception):
    pass


class MissingDirectoryError(MediaError):
    pass


class InconsistentDimensionsError(MediaError):
    pass


class UnreadableFrameError(MediaError):
    pass


class UnwritablePathError(MediaError):
    pass


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1]."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def to_bytes(frame: np.ndarray) -> np.ndarray:
    """float in [-1, 1] -> uint8, rounding to nearest level."""
    return np.clip(np.rint((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class FrameClip:
    frames: np.ndarray  # (L, H, W, 3), values in [-1, 1]
    clip_index: int = 1
    first_frame_is_condition: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (L, H, W, 3) frames, got {self.frames.shape}")
        if self.clip_index < 1:
            raise ValueError("clip_index starts at 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ClipPlan:
    total_frames: int
    clip_length: int
    clips: list[tuple[int, int]]
    padding: int = 0  # frames appended by repeating the last source frame
    overlap: int = 1

    @property
    def n_clips(self) -> int:
        return len(self.clips)

    @property
    def padded_frames(self) -> int:
        return self.total_frames + self.padding

    def pad(self, frames: np.ndarray) -> np.ndarray:
        if len(frames) != self.total_frames:
            raise ValueError(f"plan expects {self.total_frames} frames, got {len(frames)}")
        if self.padding == 0:
            return frames
        tail = np.repeat(frames[-1:], self.padding, axis=0)
        return np.concatenate([frames, tail], axis=0)

    def split(self, frames: np.ndarray) -> list[FrameClip]:
        padded = self.pad(frames)
        return [FrameClip(padded[s:e + 1], clip_index=i + 1) for i, (s, e) in enumerate(self.clips)]

    def assemble(self, clips) -> np.ndarray:
        """Join clips dropping each later clip's first (duplicated) frame; strip padding."""
        parts = []
        for i, c in enumerate(clips):
            arr = c.frames if isinstance(c, FrameClip) else np.asarray(c)
            parts.append(arr if i == 0 else arr[1:])
        out = np.concatenate(parts, axis=0)
        return out[:self.total_frames]

    def to_dict(self) -> dict:
        return {
            "total_frames": self.total_frames,
            "clip_length": self.clip_length,
            "overlap": self.overlap,
            "padding": self.padding,
            "clips": [list(c) for c in self.clips],
        }


def segment_clips(total_frames: int, clip_length: int = 14) -> ClipPlan:
    """Cut a video into clips of ``clip_length`` frames sharing one boundary frame.

    The last clip is padded by repeating the final frame when the length does
    not divide evenly; the number of padded frames is stored on the plan.
    """
    if clip_length < 2:
        raise ValueError("clip_length must be >= 2")
    if total_frames < clip_length:
        raise ValueError(f"total_frames={total_frames} is shorter than clip_length={clip_length}")
    stride = clip_length - 1
    n = math.ceil((total_frames - 1) / stride)
    clips = [(i * stride, i * stride + stride) for i in range(n)]
    padding = clips[-1][1] - (total_frames - 1)
    return ClipPlan(total_frames, clip_length, clips, padding=padding)


def _frame_files(path: Path) -> list[Path]:
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_frame_dir(path) -> np.ndarray:
    """Read every image in ``path`` (filename order) as an (N, H, W, 3) array in [-1, 1]."""
    path = Path(path)
    if not path.is_dir():
        raise MissingDirectoryError(f"no such frame directory: {path}")
    files = _frame_files(path)
    frames = []
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:  # PIL raises several unrelated types
            raise UnreadableFrameError(f"cannot decode {f}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise InconsistentDimensionsError(
                f"{f.name} has shape {arr.shape}, expected {frames[0].shape}"
            )
        frames.append(arr)
    if not frames:
        raise MissingDirectoryError(f"no image files in {path}")
    return to_unit(np.stack(frames))


def write_frame_dir(frames, path, plan: ClipPlan | None = None, extra: dict | None = None) -> None:
    """Write frames as ``frame_000001.png``... plus a manifest with count, dims and plan."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError("need a non-empty (N, H, W, 3) frame array")
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for i, fr in enumerate(frames, start=1):
            Image.fromarray(to_bytes(fr), mode="RGB").save(path / f"frame_{i:06d}.png")
        manifest = {
            "frame_count": int(len(frames)),
            "height": int(frames.shape[1]),
            "width": int(frames.shape[2]),
            "clip_plan": plan.to_dict() if plan is not None else None,
        }
        if extra:
            manifest.update(extra)
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise UnwritablePathError(f"cannot write frames to {path}: {exc}") from exc


def read_manifest(path) -> dict:
    return json.loads((Path(path) / MANIFEST_NAME).read_text())
