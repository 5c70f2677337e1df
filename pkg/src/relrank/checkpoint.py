"""Versioned binary checkpoints for a rank model and its optimizer state.

Layout (all integers little-endian)::

    magic         8 bytes  b"RLRANKCK"
    version       u32
    spec_len      u32, then spec_len bytes of UTF-8 JSON (extractor spec)
    n_values      u64, then n_values float64 parameters in declaration order
    has_state     u8
    [step u64, epoch u64, n_values float64 RMSProp cache entries]
    crc32         u32 over every preceding byte

A sidecar ``<path>.manifest`` holds ``key = value`` lines (seed, epoch,
loss history) for humans; it is not needed to load the model.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nn import FeatureExtractorSpec, RankingLayer, RankModel
from .optim import OptimState

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "IntegrityError",
    "VersionError",
    "TrainState",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "write_manifest",
    "read_manifest",
]

MAGIC = b"RLRANKCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    """File is truncated, corrupted or not a checkpoint at all."""


class VersionError(CheckpointError):
    """File is a checkpoint written by an incompatible format version."""


@dataclass
class TrainState:
    """Optimizer cache plus the number of completed epochs."""

    optim: OptimState
    epoch: int = 0


def _flat(arrays) -> bytes:
    if not arrays:
        return b""
    return np.concatenate([np.ravel(a) for a in arrays]).astype("<f8").tobytes()


def checkpoint_bytes(model: RankModel, state: TrainState | None = None) -> bytes:
    params = model.parameters()
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    n = sum(p.data.size for p in params)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(spec)), spec,
             struct.pack("<Q", n), _flat([p.data for p in params])]
    if state is None:
        parts.append(b"\x00")
    else:
        cache = state.optim.cache
        if [c.shape for c in cache] != [p.data.shape for p in params]:
            raise CheckpointError("optimizer cache does not mirror the model parameters")
        parts += [b"\x01", struct.pack("<QQ", state.optim.step, state.epoch), _flat(cache)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: RankModel, state: TrainState | None, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[RankModel, TrainState | None]:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    version, spec_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path} has format version {version}; this build reads version {FORMAT_VERSION}")
    if len(buf) < 4 or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise IntegrityError(f"{path} failed its checksum (truncated or corrupted)")
    try:
        spec = FeatureExtractorSpec.from_dict(json.loads(r.take(spec_len).decode()))
    except (ValueError, KeyError) as exc:
        raise IntegrityError(f"{path}: unreadable spec: {exc}") from exc
    (n,) = r.unpack("<Q")
    shapes = [s for _, s in spec.parameter_shapes()] + [(spec.feature_dim,), (1,)]
    if n != sum(int(np.prod(s)) for s in shapes):
        raise IntegrityError(f"{path}: parameter count {n} does not match its spec")
    values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    arrays = _split(values, shapes)
    names = [k for k, _ in spec.parameter_shapes()]
    params = {k: Tensor(a, requires_grad=True) for k, a in zip(names, arrays)}
    ranker = RankingLayer(Tensor(arrays[-2], requires_grad=True), Tensor(arrays[-1], requires_grad=True))
    model = RankModel(spec, params, ranker)
    (has_state,) = r.unpack("<B")
    state = None
    if has_state:
        step, epoch = r.unpack("<QQ")
        cache = _split(np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64), shapes)
        state = TrainState(OptimState(cache, step), epoch)
    if r.pos != len(buf) - 4:
        raise IntegrityError(f"{path}: trailing bytes after payload")
    return model, state


def _split(values: np.ndarray, shapes) -> list[np.ndarray]:
    out, k = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(values[k:k + size].reshape(s).copy())
        k += size
    return out


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
