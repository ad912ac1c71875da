"""Inversion-free batch consistency sampling.

The source trajectory is never denoised from noise: at each step the noisy
source latent is built in closed form from the clean source and a shared
noise draw, and the gap between that draw and the model's source prediction
calibrates the edit and background predictions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .blend import BlendMask, blend_latents, compute_blend_map
from .control import BatchAttentionController, ControlConfig, align_prompts
from .model import LatentBatch, PromptEmbedding, ToyDenoiser, encode_prompt
from .schedule import (
    Schedule,
    add_noise,
    build_schedule,
    consistency_noise,
    predict_z0,
    select_timesteps,
)
from .tensor import Rng, sample_normal

logger = logging.getLogger(__name__)

__all__ = [
    "LatentBatch",
    "NoiseTrajectory",
    "StepRecord",
    "EditResult",
    "source_step",
    "calibrate_noise",
    "edit_step",
    "multistep_reference_sample",
    "run_edit",
    "run_reconstruct",
]


@dataclass
class NoiseTrajectory:
    """Consistency noise per step; one draw shared by every frame and branch."""

    steps: list[np.ndarray] = field(default_factory=list)

    def draw(self, rng: Rng, frame_shape) -> np.ndarray:
        eps = sample_normal(rng, frame_shape)
        self.steps.append(eps)
        return eps


@dataclass(frozen=True)
class StepRecord:
    step: int
    t: int
    src_recon_err: float
    mask_density: float

    def line(self) -> str:
        return f"step={self.step} t={self.t} src_recon_err={self.src_recon_err:.9e} mask_density={self.mask_density:.6f}"


@dataclass
class EditResult:
    z0: np.ndarray  # [m, h, w, C]
    records: list[StepRecord]
    timesteps: list[int]
    denoiser_calls: int
    inversion_calls: int
    masks: list[list[BlendMask]] = field(default_factory=list)
    attention: list[dict] = field(default_factory=list)


def _frames(z) -> np.ndarray:
    return z.frames if isinstance(z, LatentBatch) else np.asarray(z, np.float32)


def source_step(z0_src, eps_cons: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Closed-form noisy source latents for every frame."""
    z0 = _frames(z0_src)
    eps = np.broadcast_to(np.asarray(eps_cons, np.float32), z0.shape)
    if np.shape(eps_cons) not in (z0.shape, z0.shape[1:]):
        raise ValueError(f"noise shape {np.shape(eps_cons)} does not match frames {z0.shape}")
    return add_noise(z0, eps, t, s)


def calibrate_noise(eps_cons: np.ndarray, eps_pred_src: np.ndarray) -> np.ndarray:
    if np.shape(eps_cons) != np.shape(eps_pred_src):
        raise ValueError(f"shape mismatch {np.shape(eps_cons)} vs {np.shape(eps_pred_src)}")
    return (np.asarray(eps_cons, np.float64) - eps_pred_src).astype(np.float32)


def edit_step(z_t_edit, eps_pred_edit, delta, t: int, s: Schedule) -> np.ndarray:
    """Clean edit latent from the calibrated edit noise."""
    if not (np.shape(z_t_edit) == np.shape(eps_pred_edit) == np.shape(delta)):
        raise ValueError("z_t_edit, eps_pred_edit and delta must share one shape")
    eps_edit = np.asarray(eps_pred_edit, np.float64) + np.asarray(delta, np.float64)
    return ((np.asarray(z_t_edit, np.float64) - s.b(t) * eps_edit) / s.a(t)).astype(np.float32)


def _count_inversions(log: list[int]) -> int:
    # an inversion pass walks timesteps upward
    return sum(1 for a, b in zip(log, log[1:]) if b > a)


def multistep_reference_sample(
    model: ToyDenoiser,
    prompt: PromptEmbedding | str,
    N: int,
    seed: int,
    *,
    schedule: Schedule | None = None,
    latent_shape=(8, 8, 192),
    guidance: float = 2.0,
    variance: str = "vp",
) -> np.ndarray:
    """Plain conditioned multistep consistency sampling, no editing.

    ``variance="vp"`` re-noises as ``sqrt(ab) z0 + sqrt(1 - ab) eps``;
    ``"ve"`` uses the unconditioned ``z0 + sqrt(tau^2 - t0^2) eps`` form and
    only makes sense for tests of the loop structure.
    """
    s = schedule or build_schedule()
    if N < 2:
        raise ValueError(f"need N >= 2, got {N}")
    emb = encode_prompt(prompt) if isinstance(prompt, str) else prompt
    taus = select_timesteps(s, N)
    rng = Rng(seed)
    z_hat = sample_normal(rng, latent_shape)
    z0 = predict_z0(z_hat, taus[0], model.predict(z_hat, taus[0], emb, guidance), s)
    for tau in taus[1:]:
        eps = sample_normal(rng, latent_shape)
        if variance == "vp":
            z_hat = add_noise(z0, eps, tau, s)
        elif variance == "ve":
            z_hat = (z0.astype(np.float64) + np.sqrt(float(tau) ** 2 - float(s.t0) ** 2) * eps).astype(np.float32)
        else:
            raise ValueError(f"unknown variance form {variance!r}")
        z0 = predict_z0(z_hat, tau, model.predict(z_hat, tau, emb, guidance), s)
    return z0


def run_edit(
    model: ToyDenoiser,
    z0_src,
    src_prompt: str,
    tgt_prompt: str,
    cfg: ControlConfig | None = None,
    seed: int = 0,
    *,
    steps: int = 4,
    schedule: Schedule | None = None,
    keep_masks: bool = False,
    keep_attention: bool = False,
    on_step: Callable[[StepRecord], None] | None = None,
) -> EditResult:
    """Edit a batch of clean source latents [m, h, w, C] toward ``tgt_prompt``.

    One batched three-branch denoiser call per timestep; no inversion.
    """
    s = schedule or build_schedule()
    cfg = (cfg or ControlConfig()).validate(s.T)
    z0_src = _frames(z0_src)
    if z0_src.ndim != 4:
        raise ValueError(f"expected [m, h, w, C] source latents, got {z0_src.shape}")
    m, h, w, _ = z0_src.shape
    frame_shape = z0_src.shape[1:]
    taus = select_timesteps(s, steps)
    emb_src, emb_tgt = encode_prompt(src_prompt), encode_prompt(tgt_prompt)
    alignment = align_prompts(emb_src.tokens, emb_tgt.tokens)
    controller = BatchAttentionController(cfg, alignment, m)
    coarse = model.layers(h, w)[3]  # cross-attention at the coarse level

    rng = Rng(seed)
    z_init = np.broadcast_to(sample_normal(rng, frame_shape), z0_src.shape)
    z_src = z_edit = z_bg = np.ascontiguousarray(z_init)
    eps_cons = consistency_noise(z_src, z0_src, taus[0], s)

    calls_before = len(model.call_log)
    records, masks_kept, attn_kept = [], [], []
    z0_edit = z0_bg = None
    for n, t in enumerate(taus):
        controller.begin_step()
        eps_s, eps_e, eps_b = model.denoise(
            [LatentBatch("src", z_src), LatentBatch("edit", z_edit), LatentBatch("bg", z_bg)],
            t,
            [emb_src, emb_tgt, emb_src],
            controller,
            cfg.guidance,
        )
        recon_err = float(np.abs(predict_z0(z_src, t, eps_cons, s) - z0_src).max())
        delta = calibrate_noise(eps_cons, eps_s)
        z0_edit = edit_step(z_edit, eps_e, delta, t, s)
        z0_bg = edit_step(z_bg, eps_b, delta, t, s)

        masks = None
        if cfg.blend:
            masks = [
                compute_blend_map(
                    [controller.recorded(coarse.layer_id, i, "edit")],
                    alignment,
                    cfg.thresh_edit,
                    coarse.grid,
                    upsample=h // coarse.grid[0],
                    level=coarse.level,
                    tokens=cfg.blend_tokens,
                )
                for i in range(m)
            ]
            mask_arr = np.stack([mk.mask for mk in masks])
            density = float(mask_arr.mean())
        else:
            density = 1.0
        if keep_masks and masks is not None:
            masks_kept.append(masks)
        if keep_attention:
            attn_kept.append(dict(controller.maps))

        rec = StepRecord(n + 1, t, recon_err, density)
        records.append(rec)
        logger.debug(rec.line())
        if on_step is not None:
            on_step(rec)

        if n + 1 == len(taus):
            if masks is not None:
                z0_edit = blend_latents(z0_edit, z0_bg, mask_arr)
            break
        t_next = taus[n + 1]
        eps_next = sample_normal(rng, frame_shape)
        eps_cons = np.ascontiguousarray(np.broadcast_to(eps_next, z0_src.shape))
        z_src = source_step(z0_src, eps_next, t_next, s)
        z_edit = add_noise(z0_edit, eps_cons, t_next, s)
        z_bg = add_noise(z0_bg, eps_cons, t_next, s)
        if masks is not None:
            z_edit = blend_latents(z_edit, z_bg, mask_arr)

    log = model.call_log[calls_before:]
    return EditResult(
        z0=z0_edit,
        records=records,
        timesteps=taus,
        denoiser_calls=len(log),
        inversion_calls=_count_inversions(log),
        masks=masks_kept,
        attention=attn_kept,
    )


def run_reconstruct(z0_src, seed: int = 0, *, steps: int = 4, schedule: Schedule | None = None):
    """Source branch only: closed-form trajectory and its per-step reconstruction.

    Returns the final reconstructed latents and the per-step records.
    """
    s = schedule or build_schedule()
    z0_src = _frames(z0_src)
    taus = select_timesteps(s, steps)
    rng = Rng(seed)
    frame_shape = z0_src.shape[1:]
    z_src = np.ascontiguousarray(np.broadcast_to(sample_normal(rng, frame_shape), z0_src.shape))
    eps_cons = consistency_noise(z_src, z0_src, taus[0], s)
    records = []
    z0_rec = z0_src
    for n, t in enumerate(taus):
        z0_rec = predict_z0(z_src, t, eps_cons, s)
        records.append(StepRecord(n + 1, t, float(np.abs(z0_rec - z0_src).max()), 0.0))
        if n + 1 < len(taus):
            eps_next = sample_normal(rng, frame_shape)
            eps_cons = np.ascontiguousarray(np.broadcast_to(eps_next, z0_src.shape))
            z_src = source_step(z0_src, eps_next, taus[n + 1], s)
    return z0_rec, records
