"""Deterministic stand-in for a latent consistency model.

The denoiser is a two-level network. Each level runs a tanh mixing layer,
single-head self-attention and single-head cross-attention over the prompt
embedding; the coarse level works on 2x2-merged positions and is added back
to the fine level by nearest-neighbour upsampling. Every attention layer
hands its packets to an :class:`AttentionHooks` object before
``softmax(QK^T / sqrt(d)) V`` is evaluated, which is where editing control
attaches.
"""
from __future__ import annotations

import json
import logging
import math
import os
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Rng, load_tensor, matmul, sample_normal, save_tensor

logger = logging.getLogger(__name__)

NULL_TOKEN = "<null>"
D_MODEL = 32
D_TEXT = 32
PATCH = 8
WEIGHT_SEED = 7
N_LEVELS = 2
# keeps noise predictions near unit scale with fan-in-normalised weights
OUTPUT_GAIN = 0.15
# prompt sensitivity; larger values push edited latents far outside [-1, 1]
CROSS_GAIN = 0.03

BRANCHES = ("src", "edit", "bg")


class ShapeMismatchError(ValueError):
    pass


class ControllerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# prompts


def tokenize(text: str) -> list[str]:
    tokens = []
    for word in text.lower().split():
        word = "".join(ch for ch in word if not unicodedata.category(ch).startswith("P"))
        if word:
            tokens.append(word)
    return tokens or [NULL_TOKEN]


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: tuple[str, ...]
    matrix: np.ndarray  # [n_tokens, D_TEXT]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def encode_prompt(text: str) -> PromptEmbedding:
    tokens = tuple(tokenize(text))
    rows = [sample_normal(Rng(fnv1a64(tok.encode("utf-8"))), (D_TEXT,)) for tok in tokens]
    return PromptEmbedding(tokens, np.stack(rows))


NULL_PROMPT = encode_prompt("")


# ---------------------------------------------------------------------------
# patch codec


def encode_frame(image: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """uint8 [H, W, 3] image -> [H/p, W/p, 3p^2] latent in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"expected an H x W x 3 image, got shape {image.shape}")
    H, W, _ = image.shape
    if H % patch or W % patch:
        raise ShapeMismatchError(f"frame size {W}x{H} must be a multiple of {patch} in both dimensions")
    x = image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    x = x.reshape(H // patch, patch, W // patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(H // patch, W // patch, 3 * patch * patch))


def decode_latent(z: np.ndarray, patch: int = PATCH) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 3 or z.shape[2] != 3 * patch * patch:
        raise ShapeMismatchError(f"latent last extent must be {3 * patch * patch}, got shape {z.shape}")
    h, w, _ = z.shape
    x = np.clip(z, -1.0, 1.0).reshape(h, w, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    x = x.reshape(h * patch, w * patch, 3)
    return np.rint((x.astype(np.float64) + 1.0) * 127.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# weights


def _param_specs(channels: int) -> list[tuple[str, tuple[int, int]]]:
    d, dt = D_MODEL, D_TEXT
    specs = [("in_proj", (channels, d))]
    for lvl in range(N_LEVELS):
        specs.append((f"level{lvl}.mix", (d, d)))
        specs += [(f"level{lvl}.self.{p}", (d, d)) for p in "qkvo"]
        specs += [
            (f"level{lvl}.cross.q", (d, d)),
            (f"level{lvl}.cross.k", (dt, d)),
            (f"level{lvl}.cross.v", (dt, d)),
            (f"level{lvl}.cross.o", (d, d)),
        ]
    specs += [("down", (4 * d, d)), ("out_proj", (d, channels))]
    return specs


@dataclass(frozen=True)
class DenoiserWeights:
    params: dict[str, np.ndarray]
    seed: int = WEIGHT_SEED

    @classmethod
    def generate(cls, seed: int = WEIGHT_SEED, channels: int = 3 * PATCH * PATCH) -> "DenoiserWeights":
        rng = Rng(seed)
        params = {}
        for name, shape in _param_specs(channels):
            w = sample_normal(rng, shape) / np.float32(math.sqrt(shape[0]))
            if name == "out_proj":
                w = w * np.float32(OUTPUT_GAIN)
            elif name.endswith("cross.o"):
                w = w * np.float32(CROSS_GAIN)
            w.flags.writeable = False
            params[name] = w
        return cls(params, seed)

    @property
    def channels(self) -> int:
        return self.params["in_proj"].shape[0]

    @property
    def n_attention_layers(self) -> int:
        return 2 * N_LEVELS

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for name, w in self.params.items():
            fname = name.replace(".", "_") + ".cmve"
            save_tensor(directory / fname, w)
            manifest[name] = fname
        (directory / "manifest.json").write_text(
            json.dumps({"seed": self.seed, "params": manifest}, indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, directory: str | Path) -> "DenoiserWeights":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        params = {}
        for name, fname in manifest["params"].items():
            w = load_tensor(directory / fname)
            w.flags.writeable = False
            params[name] = w
        expected = {name for name, _ in _param_specs(params["in_proj"].shape[0])}
        if set(params) != expected:
            raise ValueError(f"manifest parameters differ from the architecture: {sorted(set(params) ^ expected)}")
        return cls(params, int(manifest.get("seed", WEIGHT_SEED)))


# ---------------------------------------------------------------------------
# hooks


@dataclass(frozen=True)
class AttentionPacket:
    layer_id: int
    kind: str  # "self" | "cross"
    branch: str
    frame: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    @property
    def d(self) -> int:
        return self.q.shape[1]

    def with_qkv(self, q=None, k=None, v=None) -> "AttentionPacket":
        return replace(
            self,
            q=self.q if q is None else q,
            k=self.k if k is None else k,
            v=self.v if v is None else v,
        )


@dataclass
class LatentBatch:
    """Frames of one branch, stacked as [m, h, w, C]."""

    branch: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ShapeMismatchError(f"expected [m, h, w, C] frames, got shape {self.frames.shape}")

    @property
    def m(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.frames.shape[1:]


@dataclass(frozen=True)
class LayerInfo:
    layer_id: int
    level: int
    kind: str
    grid: tuple[int, int]  # spatial extents at this level


class AttentionHooks:
    """Identity hooks; controllers override what they need.

    ``packets`` and ``probs`` are nested ``[branch][frame]`` lists covering
    the whole batch, so every hook sees a complete snapshot of the layer.
    """

    def begin_pass(self, t: int, conditional: bool) -> None:
        pass

    def self_attention(self, layer: LayerInfo, t: int, packets: list[list[AttentionPacket]]):
        return packets

    def self_attention_output(self, layer: LayerInfo, t: int, tags: Sequence[str], out: np.ndarray) -> np.ndarray:
        return out

    def cross_attention(self, layer: LayerInfo, t: int, packets, probs: list[list[np.ndarray]]):
        return probs


_IDENTITY_HOOKS = AttentionHooks()


def timestep_embedding(t: int, dim: int = D_MODEL) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    scores = q.astype(np.float64) @ k.astype(np.float64).T / math.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=1, keepdims=True)
    return (p @ v.astype(np.float64)).astype(np.float32)


def _cross_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    scores = q.astype(np.float64) @ k.astype(np.float64).T / math.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return (p / p.sum(axis=1, keepdims=True)).astype(np.float32)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CMEDIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ToyDenoiser:
    weights: DenoiserWeights = field(default_factory=DenoiserWeights.generate)
    patch: int = PATCH
    threads: int = field(default_factory=default_threads)
    calls: int = 0
    call_log: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.weights.channels != 3 * self.patch * self.patch:
            raise ShapeMismatchError(
                f"weights expect {self.weights.channels} channels, patch {self.patch} gives {3 * self.patch ** 2}"
            )
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def reset_counters(self) -> None:
        self.calls = 0
        self.call_log.clear()

    # -- public API ---------------------------------------------------------

    def denoise(
        self,
        batches: Sequence[LatentBatch],
        t: int,
        prompts: Sequence[PromptEmbedding],
        controller: AttentionHooks | None = None,
        guidance: float = 2.0,
    ) -> list[np.ndarray]:
        """One batched noise prediction for every branch and frame.

        Classifier-free guidance runs an unconditional pass with the null
        prompt on every branch and mixes ``eps_u + g (eps_c - eps_u)``.
        """
        if len(batches) != len(prompts):
            raise ShapeMismatchError(f"{len(batches)} branches but {len(prompts)} prompts")
        shapes = {b.frames.shape for b in batches}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"branches disagree on frame shape: {sorted(shapes)}")
        m, h, w, C = batches[0].frames.shape
        if C != self.weights.channels:
            raise ShapeMismatchError(f"latent has {C} channels, model expects {self.weights.channels}")
        if h % 2 or w % 2:
            raise ShapeMismatchError(f"latent grid {h}x{w} must be even for the coarse level")
        hooks = controller or _IDENTITY_HOOKS
        self.calls += 1
        self.call_log.append(int(t))

        x = np.stack([b.frames for b in batches])
        tags = [b.branch for b in batches]
        hooks.begin_pass(t, conditional=False)
        eps_u = self._forward(x, t, [NULL_PROMPT] * len(batches), tags, hooks)
        hooks.begin_pass(t, conditional=True)
        eps_c = self._forward(x, t, list(prompts), tags, hooks)
        eps = eps_u.astype(np.float64) + float(guidance) * (eps_c.astype(np.float64) - eps_u)
        eps = eps.astype(np.float32)
        if eps.shape != x.shape:
            raise ShapeMismatchError(f"output shape {eps.shape} != input shape {x.shape}")
        return [eps[i] for i in range(len(batches))]

    def predict(self, z: np.ndarray, t: int, prompt: PromptEmbedding, guidance: float = 2.0) -> np.ndarray:
        """Single-branch prediction for [m, h, w, C] or [h, w, C] latents."""
        single = np.ndim(z) == 3
        frames = np.asarray(z, np.float32)[None] if single else z
        (eps,) = self.denoise([LatentBatch("src", frames)], t, [prompt], None, guidance)
        return eps[0] if single else eps

    def layers(self, h: int, w: int) -> list[LayerInfo]:
        out = []
        for lvl in range(N_LEVELS):
            grid = (h >> lvl, w >> lvl)
            out.append(LayerInfo(2 * lvl, lvl, "self", grid))
            out.append(LayerInfo(2 * lvl + 1, lvl, "cross", grid))
        return out

    # -- internals ----------------------------------------------------------

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(*it) for it in items]
        return list(self._pool.map(lambda it: fn(*it), items))

    def _forward(self, x, t, prompts, tags, hooks) -> np.ndarray:
        W = self.weights.params
        B, m, h, w, C = x.shape
        layers = self.layers(h, w)
        temb = timestep_embedding(t)
        h0 = (matmul(x.reshape(B, m, h * w, C), W["in_proj"]) + temb).astype(np.float32)
        h0 = self._level(0, h0, t, prompts, tags, hooks, layers[0:2])
        # 2x2 merge for the coarse level
        d = h0.shape[-1]
        g = h0.reshape(B, m, h // 2, 2, w // 2, 2, d).transpose(0, 1, 2, 4, 3, 5, 6)
        h1 = matmul(g.reshape(B, m, (h // 2) * (w // 2), 4 * d), W["down"])
        h1 = self._level(1, h1, t, prompts, tags, hooks, layers[2:4])
        up = h1.reshape(B, m, h // 2, 1, w // 2, 1, d)
        up = np.broadcast_to(up, (B, m, h // 2, 2, w // 2, 2, d)).reshape(B, m, h * w, d)
        h0 = (h0 + up).astype(np.float32)
        return matmul(h0, W["out_proj"]).reshape(B, m, h, w, C)

    def _level(self, lvl, hid, t, prompts, tags, hooks, layer_infos):
        W = self.weights.params
        pre = f"level{lvl}"
        B, m, P, d = hid.shape
        hid = (hid + np.tanh(matmul(hid, W[f"{pre}.mix"]))).astype(np.float32)

        # self-attention
        info = layer_infos[0]
        q = matmul(hid, W[f"{pre}.self.q"])
        k = matmul(hid, W[f"{pre}.self.k"])
        v = matmul(hid, W[f"{pre}.self.v"])
        packets = [
            [AttentionPacket(info.layer_id, "self", tags[b], i, q[b, i], k[b, i], v[b, i]) for i in range(m)]
            for b in range(B)
        ]
        packets = hooks.self_attention(info, t, packets)
        flat = []
        for b in range(B):
            for i in range(m):
                pk = packets[b][i]
                if pk.q.shape != (P, d) or pk.k.ndim != 2 or pk.k.shape[1] != d or pk.v.shape != pk.k.shape:
                    raise ControllerError(
                        f"layer {info.layer_id} branch {tags[b]} frame {i}: bad packet shapes "
                        f"q{pk.q.shape} k{pk.k.shape} v{pk.v.shape}"
                    )
                flat.append((pk.q, pk.k, pk.v))
        attn = np.stack(self._map(_attend, flat)).reshape(B, m, P, d)
        out = matmul(attn, W[f"{pre}.self.o"])
        out = hooks.self_attention_output(info, t, tags, out)
        if out.shape != (B, m, P, d):
            raise ControllerError(f"layer {info.layer_id}: self-attention output reshaped to {out.shape}")
        hid = (hid + out).astype(np.float32)

        # cross-attention
        info = layer_infos[1]
        q = matmul(hid, W[f"{pre}.cross.q"])
        ks = [matmul(p.matrix, W[f"{pre}.cross.k"]) for p in prompts]
        vs = [matmul(p.matrix, W[f"{pre}.cross.v"]) for p in prompts]
        packets = [
            [AttentionPacket(info.layer_id, "cross", tags[b], i, q[b, i], ks[b], vs[b]) for i in range(m)]
            for b in range(B)
        ]
        probs = [
            self._map(_cross_probs, [(q[b, i], ks[b]) for i in range(m)]) for b in range(B)
        ]
        probs = hooks.cross_attention(info, t, packets, probs)
        rows = []
        for b in range(B):
            for i in range(m):
                a = probs[b][i]
                if a.shape != (P, prompts[b].n_tokens):
                    raise ControllerError(
                        f"layer {info.layer_id} branch {tags[b]} frame {i}: attention map {a.shape}, "
                        f"expected {(P, prompts[b].n_tokens)}"
                    )
                rows.append(matmul(a, vs[b]))
        out = matmul(np.stack(rows).reshape(B, m, P, d), W[f"{pre}.cross.o"])
        return (hid + out).astype(np.float32)
