"""Dense float32 tensor helpers, the splitmix64 generator and the CMVE container.

Tensors are plain ``numpy.ndarray`` values of dtype float32 in C order.
Reductions (matmul, softmax sums, dot products) accumulate in float64 and are
rounded back to float32 once.
"""
from __future__ import annotations

import logging
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

CMVE_MAGIC = b"CMVE"
CMVE_VERSION = 1


class InvalidShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class ContainerError(ValueError):
    pass


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim == 0:
        raise InvalidShapeError("tensors have rank >= 1")
    if arr.size == 0:
        raise InvalidShapeError(f"zero extent in shape {arr.shape}")
    if check_finite and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise InvalidShapeError(f"extents must be positive, got {shape}")
    return shape


# ---------------------------------------------------------------------------
# random numbers


def _mix(z):
    # works on python ints (masked) and uint64 arrays (wrapping)
    z = (z ^ (z >> 30)) * _MIX1
    if isinstance(z, int):
        z &= MASK64
    z = (z ^ (z >> 27)) * _MIX2
    if isinstance(z, int):
        z &= MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream with a one-value Box-Muller cache."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64
        self.cache: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        out = _mix(steps + np.uint64(self.state))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def __repr__(self) -> str:
        return f"Rng(state=0x{self.state:016X})"


def sample_normal(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    """Standard normal draws via Box-Muller over splitmix64 uniforms.

    Each pair of raw outputs (u1, u2) yields two values, cosine first. An odd
    leftover sine value is cached on ``rng`` and consumed by the next call.
    """
    shape = _check_extents(shape)
    n = math.prod(shape)
    out = np.empty(n, dtype=np.float64)
    filled = 0
    if rng.cache is not None:
        out[0] = rng.cache
        rng.cache = None
        filled = 1
    remaining = n - filled
    if remaining:
        pairs = (remaining + 1) // 2
        raw = rng.next_u64_array(2 * pairs)
        # u1 in (0, 1] keeps log finite
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        out[filled:] = z[:remaining]
        if 2 * pairs > remaining:
            rng.cache = float(z[-1])
    return out.astype(np.float32).reshape(shape)


# ---------------------------------------------------------------------------
# math


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise InvalidShapeError(f"softmax_rows expects rank 2, got rank {x.ndim}")
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v); a zero-norm argument gives the neutral distance 1."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InvalidShapeError(f"length mismatch {u.shape[0]} vs {v.shape[0]}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        logger.debug("cosine_distance: zero-norm vector, returning 1.0")
        return 1.0
    cos = float(np.dot(u, v)) / (nu * nv)
    return 1.0 - min(1.0, max(-1.0, cos))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise InvalidShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (np.asarray(a, np.float64) + np.asarray(b, np.float64)).astype(np.float32)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (np.asarray(a, np.float64) * np.asarray(b, np.float64)).astype(np.float32)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return (np.asarray(a, np.float64) * float(s)).astype(np.float32)


def concat(tensors: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    return np.concatenate([np.asarray(t, np.float32) for t in tensors], axis=axis)


def slice_axis(t: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    index = [slice(None)] * np.ndim(t)
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(np.asarray(t)[tuple(index)])


def mean_axis(t: np.ndarray, axis: int) -> np.ndarray:
    return np.asarray(t, np.float64).mean(axis=axis).astype(np.float32)


# ---------------------------------------------------------------------------
# CMVE container


def dumps_tensor(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    header = CMVE_MAGIC + struct.pack("<HH", CMVE_VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.astype("<f4").tobytes(order="C")


def loads_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != CMVE_MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise ContainerError("truncated header")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != CMVE_VERSION:
        raise ContainerError(f"unsupported CMVE version {version}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise ContainerError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = math.prod(shape)
    if len(buf) != off + 4 * n:
        raise ContainerError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
    return as_tensor(data.astype(np.float32).reshape(shape))


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    Path(path).write_bytes(dumps_tensor(t))


def load_tensor(path: str | Path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
