"""Write a small synthetic clip (a disc drifting over a gradient) as PPM frames.

    python3 scripts/make_demo_frames.py demo/in --frames 8 --size 64
"""
import argparse
from pathlib import Path

import numpy as np

from cmedit.io import save_frames


def drifting_disc(m, size, seed, shift):
    gen = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    colour = gen.uniform(40, 215, 3)
    cx, cy = gen.uniform(size * 0.3, size * 0.7, 2)
    radius = size * gen.uniform(0.15, 0.3)
    tilt = gen.uniform(-1, 1, 3)
    bg = 128 + 60 * np.tanh(tilt[None, None, :] * ((xx + yy)[..., None] / size - 1))
    frames = []
    for k in range(m):
        disc = ((xx - cx - shift * k) ** 2 + (yy - cy) ** 2) < radius**2
        img = np.where(disc[..., None], colour[None, None, :], bg)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return frames


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--size", type=int, default=64, help="edge length, a multiple of 8")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--shift", type=int, default=2, help="pixels moved per frame")
    ap.add_argument("--duplicate", action="store_true", help="repeat the first frame")
    args = ap.parse_args()
    frames = drifting_disc(args.frames, args.size, args.seed, args.shift)
    if args.duplicate:
        frames = [frames[0]] * args.frames
    save_frames(args.out, frames)
    print(f"wrote {len(frames)} frames of {args.size}x{args.size} to {args.out}")


if __name__ == "__main__":
    main()
