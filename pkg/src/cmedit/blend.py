"""Blending maps from cross-attention and latent splicing."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .control import PromptAlignment


@dataclass(frozen=True)
class BlendMask:
    mask: np.ndarray  # [h, w, 1], values in {0, 1}
    level: int
    threshold: float

    @property
    def density(self) -> float:
        return float(self.mask.mean())


def _order_free_mean(maps: Sequence[np.ndarray]) -> np.ndarray:
    # sorting per element makes the float sum independent of map order
    stacked = np.sort(np.stack([np.asarray(a, np.float64) for a in maps]), axis=0)
    return stacked.sum(axis=0) / len(maps)


def edited_ratio(A: np.ndarray, columns: Sequence[int]) -> np.ndarray:
    A = np.asarray(A, np.float64)
    total = A.sum(axis=1)
    part = A[:, list(columns)].sum(axis=1) if len(columns) else np.zeros(A.shape[0])
    return np.divide(part, total, out=np.zeros_like(part), where=total > 0)


def compute_blend_map(
    maps: Sequence[np.ndarray],
    alignment: PromptAlignment,
    thresh_edit: float,
    grid: tuple[int, int],
    upsample: int = 1,
    level: int = 1,
    tokens: str = "edited",
) -> BlendMask:
    """Binary map of positions whose attention mass sits on the edited tokens.

    ``maps`` are [P, n_tgt] cross-attention maps of one frame at one
    resolution level; ``grid`` is that level's (h, w) with h*w == P and the
    result is nearest-upsampled by ``upsample`` to latent resolution.
    """
    if not maps:
        raise ValueError("need at least one recorded attention map")
    shapes = {np.shape(a) for a in maps}
    if len(shapes) != 1:
        raise ValueError(f"recorded maps differ in shape: {sorted(shapes)}")
    P = maps[0].shape[0]
    if grid[0] * grid[1] != P:
        raise ValueError(f"grid {grid} does not cover {P} positions")
    columns = alignment.edited_set if tokens == "edited" else alignment.aligned_set
    h, w = grid[0] * upsample, grid[1] * upsample
    if not columns:
        warnings.warn("no edited tokens; blend map is all zeros", RuntimeWarning, stacklevel=2)
        return BlendMask(np.zeros((h, w, 1), np.float32), level, thresh_edit)
    ratio = edited_ratio(_order_free_mean(maps), columns)
    m = (ratio >= thresh_edit).astype(np.float32).reshape(grid)
    m = np.repeat(np.repeat(m, upsample, axis=0), upsample, axis=1)
    return BlendMask(m[..., None], level, thresh_edit)


def blend_latents(z_edit: np.ndarray, z_bg: np.ndarray, mask) -> np.ndarray:
    """mask * z_edit + (1 - mask) * z_bg."""
    M = mask.mask if isinstance(mask, BlendMask) else np.asarray(mask, np.float32)
    z_edit = np.asarray(z_edit, np.float32)
    z_bg = np.asarray(z_bg, np.float32)
    if z_edit.shape != z_bg.shape:
        raise ValueError(f"latent shapes differ: {z_edit.shape} vs {z_bg.shape}")
    try:
        np.broadcast_shapes(M.shape, z_edit.shape)
    except ValueError:
        raise ValueError(f"mask shape {M.shape} does not broadcast to {z_edit.shape}") from None
    return (M * z_edit + (np.float32(1.0) - M) * z_bg).astype(np.float32)
