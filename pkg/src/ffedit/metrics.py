"""Temporal consistency, trajectory error and appearance drift."""
from __future__ import annotations

import numpy as np

from .synthetic import centroid


class NoForegroundError(ValueError):
    pass


def _projection(dim_in: int, dim_out: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in)


def patch_features(frame: np.ndarray, patch: int = 4, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Linear random projection of every non-overlapping patch: (n_patches, dim)."""
    h, w, c = frame.shape
    ph, pw = h // patch, w // patch
    x = np.asarray(frame, np.float64)[:ph * patch, :pw * patch]
    x = x.reshape(ph, patch, pw, patch, c).transpose(0, 2, 1, 3, 4).reshape(ph * pw, -1)
    return x @ _projection(x.shape[1], dim, seed)


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def temporal_consistency(frames, seed: int = 0) -> float:
    """Mean cosine similarity of adjacent frames' projected patch features."""
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    feats = [patch_features(f, seed=seed).ravel() for f in frames]
    return float(np.mean([_cos(a, b) for a, b in zip(feats[:-1], feats[1:])]))


def estimate_background(frame: np.ndarray) -> np.ndarray:
    border = np.concatenate([frame[0], frame[-1], frame[:, 0], frame[:, -1]])
    return np.median(border, axis=0)


def foreground_mask(frame, background=None, tol: float = 0.3) -> np.ndarray:
    frame = np.asarray(frame)
    bg = estimate_background(frame) if background is None else np.asarray(background)
    return np.abs(frame - bg).max(axis=-1) > tol


def trajectory_error(frames, track, background=None, tol: float = 0.3) -> float:
    """Mean Euclidean distance (pixels) between keyed foreground centroids and ``track``."""
    frames = np.asarray(frames)
    track = np.asarray(track, dtype=np.float64)
    if len(frames) != len(track):
        raise ValueError(f"{len(frames)} frames but {len(track)} track points")
    errs = []
    for i, f in enumerate(frames):
        m = foreground_mask(f, background, tol)
        if not m.any():
            raise NoForegroundError(f"no foreground detected in frame {i}")
        errs.append(np.linalg.norm(centroid(m) - track[i]))
    return float(np.mean(errs))


def appearance_features(frame, seed: int = 0) -> np.ndarray:
    """Position-free summary: mean and spread of the projected patch features."""
    f = patch_features(frame, seed=seed)
    return np.concatenate([f.mean(axis=0), f.std(axis=0)])


def appearance_distance(a, b, seed: int = 0) -> float:
    return float(np.linalg.norm(appearance_features(a, seed) - appearance_features(b, seed)))


def drift_curve(clip_first_frames, reference, seed: int = 0) -> np.ndarray:
    """Appearance distance of each clip's first frame to the clip-1 condition."""
    return np.array([appearance_distance(f, reference, seed) for f in clip_first_frames])


def format_metrics(values: dict) -> str:
    return "".join(f"metric {k} {v:.6f}\n" for k, v in values.items())
