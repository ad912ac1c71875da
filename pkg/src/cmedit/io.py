"""PPM/PGM frames and the ``key = value`` job config."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import ControlConfig, ControlError


class FrameError(ValueError):
    pass


class EmptyFrameDirError(FrameError):
    pass


class FrameFormatError(FrameError):
    pass


class UnsupportedFormatError(FrameFormatError):
    pass


class FrameSizeError(FrameError):
    pass


class ConfigError(ValueError):
    pass


_NETPBM_MAGICS = {b"P1", b"P2", b"P3", b"P4", b"P5", b"P7"}


def _header_tokens(data: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FrameFormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    magic = data[:2]
    if magic != b"P6":
        if magic in _NETPBM_MAGICS:
            raise UnsupportedFormatError(f"{path}: unsupported format {magic.decode()}, only binary P6 is read")
        raise FrameFormatError(f"{path}: bad magic {magic!r}, expected b'P6'")
    (magic, w, h, maxval), off = _header_tokens(data, 4, path)
    try:
        width, height, maxv = int(w), int(h), int(maxval)
    except ValueError:
        raise FrameFormatError(f"{path}: malformed header") from None
    if maxv != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxv} not supported, expected 255")
    if width <= 0 or height <= 0:
        raise FrameFormatError(f"{path}: nonpositive size {width}x{height}")
    n = width * height * 3
    raster = data[off : off + n]
    if len(raster) != n:
        raise FrameFormatError(f"{path}: raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), path)


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, gray) -> None:
    Path(path).write_bytes(encode_pgm(gray))


def frame_name(i: int) -> str:
    return f"frame_{i:04d}.ppm"


def load_frames(directory) -> list[np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyFrameDirError(f"{directory}: not a directory")
    paths = sorted(p for p in directory.iterdir() if p.name.startswith("frame_") and p.suffix == ".ppm")
    if not paths:
        raise EmptyFrameDirError(f"{directory}: no frame_*.ppm files")
    frames = []
    for p in paths:
        img = read_ppm(p)
        if frames and img.shape != frames[0].shape:
            raise FrameSizeError(
                f"{p}: size {img.shape[1]}x{img.shape[0]} differs from {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(img)
    return frames


def save_frames(directory, frames) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames):
        write_ppm(directory / frame_name(i), img)


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class EditJob:
    in_dir: Path | None = None
    out_dir: Path | None = None
    src_prompt: str = ""
    tgt_prompt: str = ""
    steps: int = 4
    seed: int = 0
    weight_seed: int = 7
    cfg: ControlConfig = field(default_factory=ControlConfig)
    dump_attn: bool = False
    dump_masks: bool = False

    def validate(self, T: int = 1000, need_target: bool = True) -> "EditJob":
        if self.steps < 2:
            raise ConfigError(f"steps = {self.steps} must be >= 2")
        if not self.src_prompt.strip():
            raise ConfigError("source prompt is empty")
        if need_target and not self.tgt_prompt.strip():
            raise ConfigError("target prompt is empty")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed {self.seed} is not an unsigned 64-bit integer")
        try:
            self.cfg.validate(T)
        except ControlError as e:
            raise ConfigError(str(e)) from None
        return self


_JOB_KEYS = {"steps": int, "seed": int, "weight_seed": int, "src_prompt": str, "tgt_prompt": str}
_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _unquote(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config(text: str, T: int = 1000, source: str = "<config>") -> tuple[ControlConfig, dict]:
    """Parse ``key = value`` lines into a ControlConfig plus job fields.

    Unknown keys and malformed lines raise ConfigError with the line number.
    Values are range-checked against the default schedule length ``T``.
    """
    cfg_types = {f: type(getattr(ControlConfig(), f)) for f in ControlConfig.field_names()}
    cfg_vals, job, where = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = _LINE.match(line)
        if not match:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = match.group(1), match.group(2)
        if value and value[0] in "\"'":
            value = _unquote(value)
        else:
            value = value.split("#", 1)[0].rstrip()
        if key in cfg_types:
            kind, dest = cfg_types[key], cfg_vals
        elif key in _JOB_KEYS:
            kind, dest = _JOB_KEYS[key], job
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        where[key] = lineno
        try:
            if kind is bool:
                dest[key] = _parse_bool(value)
            elif kind is int:
                dest[key] = int(value, 0)
            else:
                dest[key] = kind(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    cfg = ControlConfig(**cfg_vals)
    try:
        cfg.validate(T)
    except ControlError as e:
        key = str(e).split(" ", 1)[0]
        raise ConfigError(f"{source}:{where.get(key, '?')}: {e}") from None
    if "steps" in job and job["steps"] < 2:
        raise ConfigError(f"{source}:{where['steps']}: steps = {job['steps']} must be >= 2")
    return cfg, job


def load_config(path, T: int = 1000) -> tuple[ControlConfig, dict]:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8 ({e})") from None
    return parse_config(text, T, str(path))


def job_from_config(path, **overrides) -> EditJob:
    cfg, fields_ = load_config(path) if path else (ControlConfig(), {})
    fields_.update({k: v for k, v in overrides.items() if v is not None})
    return replace(EditJob(cfg=cfg), **fields_)
