"""Quick invariant checks for every module, printed one line each."""
from __future__ import annotations

import math
import sys
import warnings

import numpy as np

from . import blend, control, model, schedule, tensor, tokenflow
from .io import decode_ppm, encode_ppm, parse_config
from .sampler import run_edit, run_reconstruct


def _video(m=4, size=32, seed=0):
    gen = np.random.default_rng(seed)
    base = gen.integers(0, 256, (size, size, 3))
    return np.stack([model.encode_frame(np.roll(base, k, axis=1).astype(np.uint8)) for k in range(m)])


def check_rng_reference():
    return tensor.Rng(0).next_u64() == 0xE220A8397B1DCDAF


def check_normal_determinism():
    a = tensor.sample_normal(tensor.Rng(5), (3, 7))
    b = tensor.sample_normal(tensor.Rng(5), (3, 7))
    return a.tobytes() == b.tobytes()


def check_softmax_rows():
    gen = np.random.default_rng(1)
    x = gen.normal(scale=5.0, size=(200, 64))
    return np.abs(tensor.softmax_rows(x).astype(np.float64).sum(1) - 1).max() <= 1e-6


def check_concat_slice():
    a, b = np.ones((2, 3), np.float32), np.zeros((4, 3), np.float32)
    c = tensor.concat([a, b], 0)
    return np.array_equal(tensor.slice_axis(c, 0, 0, 2), a) and np.array_equal(tensor.slice_axis(c, 0, 2, 6), b)


def check_cmve_roundtrip():
    t = tensor.sample_normal(tensor.Rng(2), (2, 3, 4))
    return np.array_equal(tensor.loads_tensor(tensor.dumps_tensor(t)), t)


def check_codec_roundtrip():
    img = np.random.default_rng(3).integers(0, 256, (16, 24, 3)).astype(np.uint8)
    return np.array_equal(model.decode_latent(model.encode_frame(img)), img)


def check_denoiser_purity():
    net = model.ToyDenoiser()
    z = _video(2, 32)
    p = model.encode_prompt("a cat")
    return net.predict(z, 500, p).tobytes() == net.predict(z, 500, p).tobytes()


def check_consistency_roundtrip():
    s = schedule.build_schedule()
    gen = np.random.default_rng(4)
    for _ in range(20):
        z0 = gen.normal(size=(8,)).astype(np.float32)
        eps = gen.normal(size=(8,)).astype(np.float32)
        t = int(gen.integers(0, s.T))
        back = schedule.consistency_noise(schedule.add_noise(z0, eps, t, s), z0, t, s)
        if np.abs(back - eps).max() > 1e-5:
            return False
    return True


def check_special_variance():
    s = schedule.build_schedule()
    gen = np.random.default_rng(5)
    for _ in range(20):
        t = int(gen.integers(1, s.T))
        z, e, n = (gen.normal(size=(16,)).astype(np.float32) for _ in range(3))
        lhs = schedule.ddpm_step(z, t, e, s.sigma[t], n, s)
        z0 = schedule.predict_z0(z, t, e, s).astype(np.float64)
        rhs = math.sqrt(s.alpha_bar[t - 1]) * z0 + math.sqrt(1 - s.alpha_bar[t - 1]) * n
        if np.abs(lhs - rhs).max() > 1e-6:
            return False
    return True


def check_timesteps():
    s = schedule.build_schedule()
    return schedule.select_timesteps(s, 5) == [999, 749, 499, 249]


def check_alignment():
    al = control.align_prompts(["a", "cat"], ["a", "red", "cat"])
    return al.map == (0, None, 1)


def check_controller_neutrality():
    cfg = control.ControlConfig.neutral()
    gen = np.random.default_rng(6)
    pk = lambda b, i: model.AttentionPacket(0, "self", b, i, *(gen.normal(size=(4, 8)).astype(np.float32) for _ in range(3)))
    packets = [[pk(b, i) for i in range(2)] for b in model.BRANCHES]
    snap = control.KVSnapshot(packets)
    for row in packets:
        for p in row:
            if control.cf_masa(p, 999, cfg, snap) is not p or control.bg_masa(p, 999, cfg, snap) is not p:
                return False
    al = control.align_prompts(["a", "b"], ["a", "c"])
    A = gen.random((4, 2)).astype(np.float32)
    return control.re_ca(A, A.copy(), 999, al, cfg).tobytes() == A.tobytes()


def check_blend_partition():
    gen = np.random.default_rng(7)
    ze, zb = gen.normal(size=(2, 4, 4, 3)).astype(np.float32)
    M = (gen.random((4, 4, 1)) > 0.5).astype(np.float32)
    out = blend.blend_latents(ze, zb, M)
    on = np.broadcast_to(M, ze.shape) == 1
    return np.array_equal(out[on], ze[on]) and np.array_equal(out[~on], zb[~on])


def check_matcher_oracle():
    gen = np.random.default_rng(8)
    q, b = gen.normal(size=(2, 24, 6))
    brute = [min(range(len(b)), key=lambda j: (tensor.cosine_distance(row, b[j]), j)) for row in q]
    return list(tokenflow.match_features(q, b)) == brute


def check_keyframes():
    return tokenflow.select_keyframes(8, 4) == [0, 4, 7]


def check_ppm_roundtrip():
    img = np.random.default_rng(9).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    return np.array_equal(decode_ppm(encode_ppm(img)), img)


def check_config_defaults():
    cfg, job = parse_config("")
    return cfg == control.ControlConfig() and job == {}


def check_reconstruction():
    _, records = run_reconstruct(_video(4, 32), seed=1, steps=4)
    return max(r.src_recon_err for r in records) <= 1e-5


def check_noop_edit():
    z0 = _video(3, 32)
    net = model.ToyDenoiser()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_edit(net, z0, "a dog", "a dog", control.ControlConfig(r=1.0), seed=2, steps=3)
    return np.abs(res.z0 - z0).max() <= 1e-4 and res.denoiser_calls == 2 and res.inversion_calls == 0


def check_duplicate_frames():
    z0 = np.repeat(_video(1, 32), 5, axis=0)
    res = run_edit(model.ToyDenoiser(), z0, "a dog", "a red cat", control.ControlConfig(keyframe_stride=2), seed=3, steps=3)
    return np.abs(res.z0 - res.z0[:1]).max() <= 1e-6


CHECKS = [
    ("tensor-core: splitmix64 reference output", check_rng_reference),
    ("tensor-core: sample_normal determinism", check_normal_determinism),
    ("tensor-core: softmax rows sum to 1", check_softmax_rows),
    ("tensor-core: concat/slice recovery", check_concat_slice),
    ("tensor-core: CMVE round trip", check_cmve_roundtrip),
    ("toy-model: patch codec round trip", check_codec_roundtrip),
    ("toy-model: denoiser purity", check_denoiser_purity),
    ("schedule: consistency noise round trip", check_consistency_roundtrip),
    ("schedule: special variance identity", check_special_variance),
    ("schedule: timestep spacing", check_timesteps),
    ("attention-control: LCS alignment", check_alignment),
    ("attention-control: neutrality", check_controller_neutrality),
    ("blend: partition", check_blend_partition),
    ("tokenflow: matcher equals brute force", check_matcher_oracle),
    ("tokenflow: keyframe selection", check_keyframes),
    ("pipeline-cli: PPM round trip", check_ppm_roundtrip),
    ("pipeline-cli: empty config gives defaults", check_config_defaults),
    ("sampler: exact source reconstruction", check_reconstruction),
    ("sampler: identical-prompt edit is a no-op", check_noop_edit),
    ("sampler: duplicated frames stay identical", check_duplicate_frames),
]


def run_selftest(out=None) -> bool:
    out = out or sys.stdout
    ok = True
    for name, fn in CHECKS:
        try:
            passed, detail = bool(fn()), ""
        except Exception as e:  # a crashing check is a failing check
            passed, detail = False, f" ({type(e).__name__}: {e})"
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}{detail}", file=out)
    print(f"{'all' if ok else 'NOT all'} {len(CHECKS)} checks passed", file=out)
    return ok
