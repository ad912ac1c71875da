"""Keyframe feature propagation across frames.

Non-key frames have their spatial features replaced by a distance-weighted
mix of the nearest-matching rows from the two surrounding keyframes.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np


class PropagationError(ValueError):
    pass


def select_keyframes(m: int, stride: int) -> list[int]:
    if m < 1 or stride < 1:
        raise ValueError(f"need m >= 1 and stride >= 1, got m={m}, stride={stride}")
    return sorted(set(range(0, m, stride)) | {m - 1})


@dataclass(frozen=True)
class KeyframeFeatureBase:
    keyframes: tuple[int, ...]
    features: dict[int, np.ndarray]  # keyframe -> [P, d]
    layer_id: int = -1

    def __post_init__(self):
        kf = self.keyframes
        if not kf or list(kf) != sorted(set(kf)):
            raise PropagationError(f"keyframes must be nonempty and strictly increasing, got {kf}")
        missing = set(kf) - set(self.features)
        if missing:
            raise PropagationError(f"no features stored for keyframes {sorted(missing)}")

    def neighbours(self, i: int) -> tuple[int, int]:
        """Nearest keyframes strictly below and above non-key frame ``i``."""
        pos = bisect.bisect_left(self.keyframes, i)
        if pos == 0 or pos == len(self.keyframes):
            raise PropagationError(f"frame {i} has no keyframe on both sides in {self.keyframes}")
        return self.keyframes[pos - 1], self.keyframes[pos]


def build_base(features: np.ndarray, keyframes, layer_id: int = -1) -> KeyframeFeatureBase:
    """Snapshot keyframe rows from per-frame features [m, P, d]."""
    return KeyframeFeatureBase(tuple(keyframes), {k: features[k] for k in keyframes}, layer_id)


def match_features(query: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Index of the base row with least cosine distance, lowest index on ties."""
    q = np.asarray(query, np.float64)
    b = np.asarray(base, np.float64)
    if q.ndim != 2 or b.ndim != 2 or q.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {q.shape} vs {b.shape}")
    nq = np.sqrt(np.einsum("ij,ij->i", q, q))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    denom = nq[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip((q @ b.T) / denom, -1.0, 1.0)
    dist = np.where(denom == 0.0, 1.0, 1.0 - cos)
    return np.argmin(dist, axis=1)


def frame_weight(i: int, lo: int, hi: int) -> float:
    return (i - lo) / (hi - lo)


@dataclass(frozen=True)
class MatchResult:
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    weight: float


def match_frame(features_i: np.ndarray, base: KeyframeFeatureBase, i: int) -> MatchResult:
    lo, hi = base.neighbours(i)
    return MatchResult(
        match_features(features_i, base.features[lo]),
        match_features(features_i, base.features[hi]),
        frame_weight(i, lo, hi),
    )


def propagate(features_i: np.ndarray, base: KeyframeFeatureBase, i: int, w: float | None = None) -> np.ndarray:
    if i in base.features:
        return features_i
    lo, hi = base.neighbours(i)
    match = match_frame(features_i, base, i)
    w = match.weight if w is None else float(w)
    if not 0.0 <= w <= 1.0:
        raise PropagationError(f"weight {w} outside [0, 1]")
    fwd = base.features[hi][match.gamma_plus].astype(np.float64)
    bwd = base.features[lo][match.gamma_minus].astype(np.float64)
    return (w * fwd + (1.0 - w) * bwd).astype(np.float32)


def propagate_frames(features: np.ndarray, keyframes, layer_id: int = -1) -> np.ndarray:
    """Apply propagation to every non-key frame of [m, P, d] features."""
    keyframes = list(keyframes)
    if len(keyframes) == features.shape[0]:
        return features
    base = build_base(features, keyframes, layer_id)
    out = features.copy()
    for i in range(features.shape[0]):
        if i not in base.features:
            out[i] = propagate(features[i], base, i)
    return out
