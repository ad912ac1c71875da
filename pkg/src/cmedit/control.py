"""Attention control for three-branch editing.

Branches are ``src`` (source prompt, exact reconstruction), ``edit`` (target
prompt) and ``bg`` (source prompt, edit structure with source content).
A threshold below zero disables its controller entirely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .model import AttentionHooks, AttentionPacket, LayerInfo
from .tensor import concat
from .tokenflow import propagate_frames, select_keyframes

DISABLED = -1


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class PromptAlignment:
    src_tokens: tuple[str, ...]
    tgt_tokens: tuple[str, ...]
    map: tuple[int | None, ...]  # target index -> source index

    @property
    def edited_set(self) -> tuple[int, ...]:
        return tuple(j for j, s in enumerate(self.map) if s is None)

    @property
    def aligned_set(self) -> tuple[int, ...]:
        return tuple(j for j, s in enumerate(self.map) if s is not None)


def align_prompts(src_tokens: Sequence[str], tgt_tokens: Sequence[str]) -> PromptAlignment:
    """Longest-common-subsequence alignment on exact token equality.

    Among equally long alignments, the earliest matching source token wins.
    """
    src, tgt = list(src_tokens), list(tgt_tokens)
    if not src or not tgt:
        raise ControlError("token lists must be nonempty")
    n, k = len(src), len(tgt)
    # L[i][j] = LCS length of src[i:], tgt[j:]
    L = [[0] * (k + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(k - 1, -1, -1):
            if src[i] == tgt[j]:
                L[i][j] = L[i + 1][j + 1] + 1
            else:
                L[i][j] = max(L[i + 1][j], L[i][j + 1])
    mapping: list[int | None] = [None] * k
    i = j = 0
    while i < n and j < k:
        if src[i] == tgt[j] and L[i][j] == L[i + 1][j + 1] + 1:
            mapping[j] = i
            i += 1
            j += 1
        elif L[i + 1][j] >= L[i][j + 1]:
            i += 1
        else:
            j += 1
    return PromptAlignment(tuple(src), tuple(tgt), tuple(mapping))


@dataclass(frozen=True)
class ControlConfig:
    t_s: int = 400
    t_c: int = 400
    t_bg: int = 600
    r: float = 1.5
    thresh_edit: float = 0.3
    guidance: float = 2.0
    keyframe_stride: int = 4
    tokenflow: bool = True
    blend: bool = True
    # which tokens feed the blend-map numerator: "edited" (unaligned) or "aligned"
    blend_tokens: str = "edited"

    def validate(self, T: int) -> "ControlConfig":
        for name in ("t_s", "t_c", "t_bg"):
            v = getattr(self, name)
            if v != DISABLED and not 0 <= v < T:
                raise ControlError(f"{name} = {v} must lie in [0, {T}) or be {DISABLED} (disabled)")
        if not (self.r >= 1.0 and math.isfinite(self.r)):
            raise ControlError(f"r = {self.r} must be >= 1")
        if not 0.0 <= self.thresh_edit <= 1.0:
            raise ControlError(f"thresh_edit = {self.thresh_edit} must lie in [0, 1]")
        if not math.isfinite(self.guidance):
            raise ControlError("guidance must be finite")
        if self.keyframe_stride < 1:
            raise ControlError(f"keyframe_stride = {self.keyframe_stride} must be >= 1")
        if self.blend_tokens not in ("edited", "aligned"):
            raise ControlError(f"blend_tokens must be 'edited' or 'aligned', got {self.blend_tokens!r}")
        return self

    @classmethod
    def neutral(cls, **overrides) -> "ControlConfig":
        base = dict(t_s=DISABLED, t_c=DISABLED, t_bg=DISABLED, r=1.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def triggered(t: int, threshold: int) -> bool:
    return threshold != DISABLED and t >= threshold


class KVSnapshot:
    """All frames' self-attention packets of one layer, keyed by branch."""

    def __init__(self, packets: Sequence[Sequence[AttentionPacket]]):
        self.by_branch = {row[0].branch: list(row) for row in packets if row}
        self._cat: dict[tuple[str, str], np.ndarray] = {}

    def packet(self, branch: str, frame: int) -> AttentionPacket:
        try:
            return self.by_branch[branch][frame]
        except KeyError:
            raise ControlError(f"snapshot has no {branch!r} branch") from None

    def concat_k(self, branch: str) -> np.ndarray:
        return self._concat(branch, "k")

    def concat_v(self, branch: str) -> np.ndarray:
        return self._concat(branch, "v")

    def _concat(self, branch: str, which: str) -> np.ndarray:
        key = (branch, which)
        if key not in self._cat:
            if branch not in self.by_branch:
                raise ControlError(f"snapshot has no {branch!r} branch")
            self._cat[key] = concat([getattr(p, which) for p in self.by_branch[branch]], axis=0)
        return self._cat[key]


def _need_snapshot(snapshot):
    if snapshot is None:
        raise ControlError("missing all-frame K/V snapshot")


def cross_frame(packet: AttentionPacket, snapshot: KVSnapshot) -> AttentionPacket:
    """Own-branch attention over the keys/values of every frame."""
    _need_snapshot(snapshot)
    return packet.with_qkv(k=snapshot.concat_k(packet.branch), v=snapshot.concat_v(packet.branch))


def cf_masa(packet: AttentionPacket, t: int, cfg: ControlConfig, snapshot: KVSnapshot | None) -> AttentionPacket:
    """Cross-frame mutual self-attention on the edit branch."""
    if packet.kind != "self":
        raise ControlError("cf_masa applies to self-attention packets only")
    if packet.branch != "edit" or cfg.t_s == DISABLED:
        return packet
    _need_snapshot(snapshot)
    if t >= cfg.t_s:
        return packet.with_qkv(
            q=snapshot.packet("src", packet.frame).q,
            k=snapshot.concat_k("src"),
            v=snapshot.concat_v("edit"),
        )
    return packet.with_qkv(k=snapshot.concat_k("edit"), v=snapshot.concat_v("edit"))


def bg_masa(packet: AttentionPacket, t: int, cfg: ControlConfig, snapshot: KVSnapshot | None) -> AttentionPacket:
    """Background-branch self-attention: source keys/values throughout."""
    if packet.kind != "self":
        raise ControlError("bg_masa applies to self-attention packets only")
    if packet.branch != "bg" or cfg.t_bg == DISABLED:
        return packet
    _need_snapshot(snapshot)
    donor = "src" if t >= cfg.t_bg else "edit"
    return packet.with_qkv(
        q=snapshot.packet(donor, packet.frame).q,
        k=snapshot.concat_k("src"),
        v=snapshot.concat_v("src"),
    )


def re_ca(
    A_src: np.ndarray, A_edit: np.ndarray, t: int, alignment: PromptAlignment, cfg: ControlConfig
) -> np.ndarray:
    """Copy aligned source columns into the edit map, scale edited columns by r."""
    if A_edit.shape[1] != len(alignment.tgt_tokens):
        raise ControlError(f"edit map has {A_edit.shape[1]} columns for {len(alignment.tgt_tokens)} target tokens")
    if A_src.shape[1] != len(alignment.src_tokens):
        raise ControlError(f"source map has {A_src.shape[1]} columns for {len(alignment.src_tokens)} source tokens")
    if A_src.shape[0] != A_edit.shape[0]:
        raise ControlError(f"row count differs: {A_src.shape[0]} vs {A_edit.shape[0]}")
    if not triggered(t, cfg.t_c):
        return A_edit
    out = A_edit.copy()
    for j, s in enumerate(alignment.map):
        if s is not None:
            out[:, j] = A_src[:, s]
    edited = list(alignment.edited_set)
    if edited and cfg.r != 1.0:
        out[:, edited] = (out[:, edited].astype(np.float64) * cfg.r).astype(np.float32)
    return out


@dataclass
class BatchAttentionController(AttentionHooks):
    """Hooks that run the full editing control over a three-branch batch.

    Every branch attends over its own frame-concatenated keys and values;
    CF-Masa and Bg-Masa then override the edit and bg branches. Re-CA and
    map recording only act on the conditional guidance pass.
    """

    cfg: ControlConfig
    alignment: PromptAlignment
    m: int
    tokenflow_branches: tuple[str, ...] = ("src", "edit", "bg")
    record: bool = True
    keyframes: list[int] = field(init=False)
    conditional: bool = field(init=False, default=True)
    # (layer_id, frame, branch) -> post-control cross-attention probabilities
    maps: dict[tuple[int, int, str], np.ndarray] = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.keyframes = select_keyframes(self.m, self.cfg.keyframe_stride)

    def begin_step(self) -> None:
        self.maps = {}

    def begin_pass(self, t: int, conditional: bool) -> None:
        self.conditional = conditional

    def self_attention(self, layer: LayerInfo, t: int, packets):
        snap = KVSnapshot(packets)
        out = []
        for row in packets:
            new_row = []
            for pk in row:
                if pk.branch == "edit" and self.cfg.t_s != DISABLED:
                    pk = cf_masa(pk, t, self.cfg, snap)
                elif pk.branch == "bg" and self.cfg.t_bg != DISABLED:
                    pk = bg_masa(pk, t, self.cfg, snap)
                else:
                    pk = cross_frame(pk, snap)
                new_row.append(pk)
            out.append(new_row)
        return out

    def self_attention_output(self, layer: LayerInfo, t: int, tags, out: np.ndarray) -> np.ndarray:
        if not self.cfg.tokenflow or len(self.keyframes) == self.m:
            return out
        out = out.copy()
        for b, tag in enumerate(tags):
            if tag in self.tokenflow_branches:
                out[b] = propagate_frames(out[b], self.keyframes, layer.layer_id)
        return out

    def cross_attention(self, layer: LayerInfo, t: int, packets, probs):
        if not self.conditional:
            return probs
        tags = [row[0].branch for row in packets]
        probs = [list(row) for row in probs]
        if "edit" in tags and "src" in tags:
            bs, be = tags.index("src"), tags.index("edit")
            for i in range(self.m):
                probs[be][i] = re_ca(probs[bs][i], probs[be][i], t, self.alignment, self.cfg)
        if self.record:
            for b, tag in enumerate(tags):
                for i in range(self.m):
                    self.maps[(layer.layer_id, i, tag)] = probs[b][i]
        return probs

    def recorded(self, layer_id: int, frame: int, branch: str = "edit") -> np.ndarray:
        return self.maps[(layer_id, frame, branch)]
