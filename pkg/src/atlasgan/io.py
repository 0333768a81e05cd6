"""File formats: tensor containers, checksummed checkpoints, PGM snapshots and
flat key = value run configs."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

TENSOR_MAGIC = b"ATGT"
CHECKPOINT_MAGIC = b"ATGC"
VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    def __init__(self, msg, line):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- tensor container ------------------------------------------------------------

def encode_tensor(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim > 255:
        raise ValueError("rank above 255 not representable")
    head = TENSOR_MAGIC + bytes([VERSION, a.ndim]) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Parse one container starting at ``offset``; return (array, next offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < 6:
        raise FormatError("truncated tensor header", len(buf))
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}", offset)
    if buf[offset + 4] != VERSION:
        raise FormatError(f"unsupported tensor version {buf[offset + 4]}", offset + 4)
    rank = buf[offset + 5]
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated tensor extents", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
    return arr, pos + nbytes


def write_tensor(path, arr):
    _atomic_write(path, encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor", end)
    return arr


# -- checkpoint -------------------------------------------------------------------

def encode_checkpoint(entries: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, bytes([VERSION]), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        parts += [struct.pack("<H", len(nb)), nb, encode_tensor(arr)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf) -> dict:
    buf = bytes(buf)
    if len(buf) < 13:
        raise FormatError("truncated checkpoint", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {buf[4]}", 4)
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch", len(buf) - 4)
    (count,) = struct.unpack_from("<I", buf, 5)
    pos, end = 9, len(buf) - 4
    out = {}
    body = memoryview(buf)[:end]
    for _ in range(count):
        if end - pos < 2:
            raise FormatError("truncated entry header", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if end - pos < n:
            raise FormatError("truncated entry name", pos)
        name = buf[pos:pos + n].decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate entry {name!r}", pos)
        pos += n
        out[name], pos = decode_tensor(body, pos)
    if pos != end:
        raise FormatError(f"{end - pos} unparsed bytes before CRC", pos)
    return out


def write_checkpoint(path, entries: dict):
    _atomic_write(path, encode_checkpoint(entries))


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def pack_u32(values) -> np.ndarray:
    """Store integers bit-exactly in a float32 container."""
    return np.asarray(values, dtype=np.uint32).view(np.float32)


def unpack_u32(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32).view(np.uint32)


def pack_u64(values) -> np.ndarray:
    return np.asarray(values, dtype=np.uint64).view(np.uint32).view(np.float32)


def unpack_u64(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32).view(np.uint32).view(np.uint64)


def pack_f64(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).view(np.float32)


def unpack_f64(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32).view(np.float64)


# -- PGM ------------------------------------------------------------------------

def pgm_bytes(image) -> bytes:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"export_pgm: expected a 2D image, got shape {a.shape}")
    lo, hi = a.min(), a.max()
    if hi == lo:
        px = np.full(a.shape, 128, dtype=np.uint8)
    else:
        px = np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def export_pgm(image, path):
    _atomic_write(path, pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError("not a binary PGM", 0)
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# -- run configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    mode: str = "conditional"
    image_size: int = 64
    widths: int = 16
    lambda_gan: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01
    r1_gamma: float = 1e-3
    lncc_window: int = 9
    eta_g: float | None = None
    eta_d: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    iters: int = 2000
    batch: int = 32
    seed: int = 0
    aug_policy: str = "translate,dihedral"
    symmetry_weight: float = 0.0
    data_manifest: str = ""
    out_dir: str = "run"
    # keys beyond the core set
    reg_reduction: str = "mean"
    eval_interval: int = 500
    checkpoint_interval: int = 500
    integration_steps: int = 5
    history_window: int = 100
    n_samples: int = 500
    age_max: float = 40.0

    def __post_init__(self):
        presets = {"conditional": (1e-4, 3e-4, 0.0, 0.9), "unconditional": (1e-4, 1e-4, 0.5, 0.999)}
        if self.mode not in presets:
            raise ValueError(f"mode must be one of {sorted(presets)}, got {self.mode!r}")
        eg, ed, b1, b2 = presets[self.mode]
        self.eta_g = eg if self.eta_g is None else self.eta_g
        self.eta_d = ed if self.eta_d is None else self.eta_d
        self.beta1 = b1 if self.beta1 is None else self.beta1
        self.beta2 = b2 if self.beta2 is None else self.beta2

    @property
    def policy(self):
        return tuple(p.strip() for p in self.aug_policy.split(",") if p.strip())


_NONNEG = {"lambda_gan", "lambda1", "lambda2", "lambda3", "r1_gamma", "eta_g", "eta_d", "beta1", "beta2",
           "symmetry_weight", "age_max"}
_POSITIVE_INT = {"image_size", "widths", "iters", "batch", "lncc_window", "eval_interval",
                 "checkpoint_interval", "integration_steps", "history_window", "n_samples"}
_FLOAT = {f.name for f in fields(RunConfig) if f.type in ("float", "float | None")}
_INT = {f.name for f in fields(RunConfig) if f.type == "int"}


def _parse_value(key, raw, line):
    try:
        if key in _FLOAT:
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError
        elif key in _INT:
            val = int(raw)
        else:
            val = raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}", line) from None
    if key in _NONNEG and val < 0:
        raise ConfigError(f"{key} must be nonnegative, got {raw}", line)
    if key in _POSITIVE_INT and val < 1:
        raise ConfigError(f"{key} must be a positive integer, got {raw}", line)
    if key in ("beta1", "beta2") and val >= 1:
        raise ConfigError(f"{key} must be < 1, got {raw}", line)
    if key == "seed" and val < 0:
        raise ConfigError(f"seed must be nonnegative, got {raw}", line)
    if key == "lncc_window" and val % 2 == 0:
        raise ConfigError(f"lncc_window must be odd, got {raw}", line)
    if key == "image_size" and val % 16:
        raise ConfigError(f"image_size must be a multiple of 16, got {raw}", line)
    if key == "mode" and val not in ("conditional", "unconditional"):
        raise ConfigError(f"mode must be conditional or unconditional, got {raw!r}", line)
    if key == "reg_reduction" and val not in ("sum", "mean"):
        raise ConfigError(f"reg_reduction must be sum or mean, got {raw!r}", line)
    if key == "aug_policy":
        for p in (s.strip() for s in val.split(",")):
            if p and p not in ("translate", "dihedral"):
                raise ConfigError(f"unknown augmentation {p!r}", line)
    return val


def parse_config(text: str) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values, seen = {}, {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        values[key] = _parse_value(key, val, lineno)
    return RunConfig(**values)


def read_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
