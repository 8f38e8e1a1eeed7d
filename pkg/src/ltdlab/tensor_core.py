"""Dense float64 tensors, seeded counter-based sampling and the ``.ltdt`` file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, laid out row-major
with the global dim order (F, H, W, C). The helpers here validate shapes and keep
arithmetic deterministic.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

MAGIC = b"LTDT"
VERSION_F32 = 1
VERSION_F64 = 2
MAX_RANK = 4
_HEADER = struct.Struct("<4sBBH")


class InvalidShapeError(ValueError):
    """Raised for non-positive extents or mismatched tensor shapes."""


class FormatError(ValueError):
    """Raised when a tensor file cannot be decoded."""


class Rng:
    """Seeded counter-based generator (Philox) that can be split into named streams.

    ``Rng(seed).stream(i, j)`` always yields the same independent sub-generator for
    the same path, regardless of what has been drawn from the parent.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._bits = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bits)

    def stream(self, *path: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(path))

    def uniform(self, size: int) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size: int | None = None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims or len(dims) > MAX_RANK:
        raise InvalidShapeError(f"rank must be in 1..{MAX_RANK}, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise InvalidShapeError(f"all extents must be positive, got {dims}")
    return dims


def sample_gaussian(rng: Rng, dims: Sequence[int]) -> np.ndarray:
    """I.i.d. standard normals via Box-Muller on ``rng``'s uniform stream."""
    dims = _check_dims(dims)
    n = int(np.prod(dims))
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
    u2 = u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(dims)


def as_tensor(values) -> np.ndarray:
    t = np.ascontiguousarray(values, dtype=np.float64)
    _check_dims(t.shape)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    _same_shape(a, b)
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return a * float(k)


def reduce_mean(a: np.ndarray) -> float:
    """Mean with strict left-to-right summation over the row-major order."""
    flat = np.ascontiguousarray(a, dtype=np.float64).ravel()
    if flat.size == 0:
        raise InvalidShapeError("reduce_mean of an empty tensor")
    # cumsum accumulates sequentially, unlike the pairwise np.sum
    return float(np.cumsum(flat)[-1] / flat.size)


def save_tensor(t: np.ndarray, path: str | os.PathLike, *, exact: bool = False) -> None:
    """Write ``t`` as an ``.ltdt`` file.

    The default (version 1) payload is float32. ``exact=True`` writes version 2
    with a float64 payload, used for checkpoints that must replay bit-for-bit.
    """
    t = np.asarray(t, dtype=np.float64)
    dims = _check_dims(t.shape)
    version = VERSION_F64 if exact else VERSION_F32
    dtype = "<f8" if exact else "<f4"
    header = _HEADER.pack(MAGIC, version, len(dims), 0) + struct.pack(f"<{len(dims)}I", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, rank, reserved = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version not in (VERSION_F32, VERSION_F64):
        raise FormatError(f"bad version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"bad rank {rank}")
    if reserved != 0:
        raise FormatError("bad reserved field")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    if any(d == 0 for d in dims):
        raise FormatError(f"bad dims {dims}")
    itemsize = 8 if version == VERSION_F64 else 4
    count = int(np.prod(dims))
    payload = buf[off:]
    if len(payload) < count * itemsize:
        raise FormatError("truncated payload")
    if len(payload) > count * itemsize:
        raise FormatError("trailing bytes after payload")
    dtype = "<f8" if version == VERSION_F64 else "<f4"
    return np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(dims)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
