"""Time run_edit against the number of sampling steps.

Prints one key=value line per N: denoiser calls, inversion calls, best-of-R
wall time, and time per denoiser call. Cost should grow linearly in N-1.
"""
import argparse
import time

import numpy as np

from cmedit.model import ToyDenoiser, encode_frame
from cmedit.sampler import run_edit

from make_demo_frames import drifting_disc


def main():
    ap = argparse.ArgumentParser(description="step-count timing for run_edit")
    ap.add_argument("--steps", type=int, nargs="+", default=[2, 4, 8, 16])
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    z0 = np.stack([encode_frame(f) for f in drifting_disc(args.frames, args.size, 0, 2)])
    model = ToyDenoiser() if args.threads is None else ToyDenoiser(threads=args.threads)
    run_edit(model, z0, "a ball", "a red ball", steps=2)
    for n in args.steps:
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = run_edit(model, z0, "a ball", "a red ball", steps=n)
            best = min(best, time.perf_counter() - t0)
        per_call = best / res.denoiser_calls
        print(
            f"steps={n} denoiser_calls={res.denoiser_calls} inversion_calls={res.inversion_calls} "
            f"seconds={best:.4f} seconds_per_call={per_call:.4f}"
        )


if __name__ == "__main__":
    main()
