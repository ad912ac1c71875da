"""Desk-scale quality proxies for an edited frame sequence."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import PATCH, encode_frame
from .tensor import cosine_distance


def compute_diagnostics(src_frames: Sequence[np.ndarray], edit_frames: Sequence[np.ndarray], patch: int = PATCH) -> dict:
    """Temporal consistency and fidelity proxies on decoded uint8 frames.

    ``temporal`` is the mean cosine similarity between latent features of
    adjacent edited frames (1.0 for a single frame); ``fidelity`` is the mean
    per-frame RMS latent distance from edit to source.
    """
    if len(src_frames) != len(edit_frames):
        raise ValueError(f"{len(src_frames)} source frames vs {len(edit_frames)} edited frames")
    src = [encode_frame(f, patch).ravel() for f in src_frames]
    edit = [encode_frame(f, patch).ravel() for f in edit_frames]
    sims = [1.0 - cosine_distance(a, b) for a, b in zip(edit, edit[1:])]
    temporal = float(np.mean(sims)) if sims else 1.0
    dists = [float(np.sqrt(np.mean((e.astype(np.float64) - s) ** 2))) for s, e in zip(src, edit)]
    return {"frames": len(edit_frames), "temporal": temporal, "fidelity": float(np.mean(dists))}


def format_record(record: dict, prefix: str = "summary") -> str:
    parts = [prefix]
    for k, v in record.items():
        parts.append(f"{k}={v:.9f}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)
