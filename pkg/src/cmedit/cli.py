"""Command line entry point: ``cmedit edit|reconstruct|selftest``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .diagnostics import compute_diagnostics, format_record
from .io import ConfigError, EditJob, FrameError, job_from_config, load_frames, save_frames, write_pgm
from .model import PATCH, DenoiserWeights, ToyDenoiser, decode_latent, encode_frame
from .sampler import run_edit, run_reconstruct
from .tensor import save_tensor

log = logging.getLogger("cmedit")

DIAGNOSTICS_FILE = "diagnostics.txt"


def _latents(frames, patch):
    return np.stack([encode_frame(f, patch) for f in frames])


def cmd_edit(job: EditJob) -> int:
    job.validate()
    frames = load_frames(job.in_dir)
    model = ToyDenoiser(DenoiserWeights.generate(job.weight_seed))
    z0 = _latents(frames, model.patch)
    result = run_edit(
        model,
        z0,
        job.src_prompt,
        job.tgt_prompt,
        job.cfg,
        job.seed,
        steps=job.steps,
        keep_masks=job.dump_masks,
        keep_attention=job.dump_attn,
    )
    out = Path(job.out_dir)
    edited = [decode_latent(z, model.patch) for z in result.z0]
    save_frames(out, edited)

    lines = [rec.line() for rec in result.records]
    summary = compute_diagnostics(frames, edited, model.patch)
    summary.update(steps=job.steps, denoiser_calls=result.denoiser_calls, inversion_calls=result.inversion_calls)
    lines.append(format_record(summary))
    (out / DIAGNOSTICS_FILE).write_text("\n".join(lines) + "\n")

    if job.dump_masks:
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        for n, step_masks in enumerate(result.masks, 1):
            for i, mk in enumerate(step_masks):
                gray = (mk.mask[..., 0] * 255).astype(np.uint8)
                gray = np.kron(gray, np.ones((model.patch, model.patch), np.uint8))
                write_pgm(mdir / f"step{n:02d}_frame{i:04d}.pgm", gray)
    if job.dump_attn:
        adir = out / "attn"
        adir.mkdir(exist_ok=True)
        for n, maps in enumerate(result.attention, 1):
            for (layer, frame, branch), a in sorted(maps.items()):
                save_tensor(adir / f"step{n:02d}_layer{layer}_frame{frame:04d}_{branch}.cmve", a)
    log.info("wrote %d frames to %s", len(edited), out)
    return 0


def cmd_reconstruct(job: EditJob) -> int:
    job.validate(need_target=False)
    frames = load_frames(job.in_dir)
    patch = PATCH
    z0 = _latents(frames, patch)
    z_rec, records = run_reconstruct(z0, job.seed, steps=job.steps)
    out = Path(job.out_dir)
    save_frames(out, [decode_latent(z, patch) for z in z_rec])
    worst = max(r.src_recon_err for r in records)
    lines = [r.line() for r in records] + [f"summary frames={len(frames)} steps={job.steps} max_recon_err={worst:.9e}"]
    (out / DIAGNOSTICS_FILE).write_text("\n".join(lines) + "\n")
    print(f"max per-step reconstruction error {worst:.3e} over {len(records)} steps")
    return 0


def cmd_selftest() -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmedit", description="Inversion-free consistency-model video editing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("edit", "reconstruct"):
        p = sub.add_parser(name)
        p.add_argument("--in", dest="in_dir", type=Path, required=True)
        p.add_argument("--out", dest="out_dir", type=Path, required=True)
        p.add_argument("--src-prompt")
        p.add_argument("--tgt-prompt")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", type=Path)
        p.add_argument("--dump-attn", action="store_true", default=None)
        p.add_argument("--dump-masks", action="store_true", default=None)
    sub.add_parser("selftest")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest()
        job = job_from_config(
            args.config,
            in_dir=args.in_dir,
            out_dir=args.out_dir,
            src_prompt=args.src_prompt,
            tgt_prompt=args.tgt_prompt,
            steps=args.steps,
            seed=args.seed,
            dump_attn=args.dump_attn,
            dump_masks=args.dump_masks,
        )
        if args.command == "edit":
            return cmd_edit(job)
        return cmd_reconstruct(job)
    except (ConfigError, FrameError, ValueError, RuntimeError, OSError) as e:
        print(f"cmedit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
