"""Latent Temporal Discrepancy: a per-voxel motion prior and the loss weights built from it.

Formulas use 1-based frame indices ``f = 1..F_l``; arrays are 0-based, and the
shift happens only in :func:`ltd_map` / :func:`ltd_map_bruteforce` where
``window_bounds`` results are turned into slices.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ltdlab.tensor_core import InvalidShapeError


class Norm(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"


@dataclass(frozen=True)
class LtdConfig:
    tau: int = 3
    norm: Norm = Norm.L2

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        object.__setattr__(self, "norm", Norm(self.norm))


def window_bounds(f: int, num_frames: int, tau: int) -> tuple[int, int]:
    """Clamped window ``(L_f, R_f)`` around 1-based frame ``f``."""
    half = tau // 2
    return max(1, f - half), min(num_frames, f + half)


def _channel_norm(diff: np.ndarray, norm: Norm) -> np.ndarray:
    if norm == Norm.L2:
        return np.sqrt(np.sum(diff * diff, axis=-1))
    return np.sum(np.abs(diff), axis=-1)


def ltd_map(z: np.ndarray, cfg: LtdConfig = LtdConfig()) -> np.ndarray:
    """Discrepancy tensor of shape (F_l, H_l, W_l) for a clean latent ``z``.

    Each frame-to-frame difference norm is computed once and averaged over the
    window of every frame that contains it.
    """
    if z.ndim != 4:
        raise InvalidShapeError(f"expected (F, H, W, C) latent, got shape {z.shape}")
    F = z.shape[0]
    out = np.zeros(z.shape[:3])
    if F == 1:
        return out
    # step[i] is the norm of z(i+2) - z(i+1) in 1-based terms
    step = _channel_norm(z[1:] - z[:-1], cfg.norm)
    for f in range(1, F + 1):
        lo, hi = window_bounds(f, F, cfg.tau)
        if hi == lo:
            continue
        acc = step[lo - 1].copy()
        for i in range(lo, hi - 1):
            acc += step[i]
        out[f - 1] = acc / (hi - lo)
    return out


def ltd_map_bruteforce(z: np.ndarray, cfg: LtdConfig = LtdConfig()) -> np.ndarray:
    """Literal loop over every voxel and window pair; no shared intermediates."""
    if z.ndim != 4:
        raise InvalidShapeError(f"expected (F, H, W, C) latent, got shape {z.shape}")
    F, H, W, C = z.shape
    out = np.zeros((F, H, W))
    for f in range(1, F + 1):
        lo, hi = window_bounds(f, F, cfg.tau)
        if hi == lo:
            continue
        for h in range(H):
            for w in range(W):
                total = 0.0
                for i in range(lo, hi):
                    d = z[i, h, w, :] - z[i - 1, h, w, :]
                    if cfg.norm == Norm.L2:
                        n = np.sqrt(np.sum(d * d))
                    else:
                        n = np.sum(np.abs(d))
                    total = total + n
                out[f - 1, h, w] = total / (hi - lo)
    return out


def weight_map(D: np.ndarray) -> np.ndarray:
    """``ln(e + D)``; equals 1 exactly where D is 0."""
    D = np.asarray(D, dtype=np.float64)
    if np.any(D < 0):
        raise ValueError("discrepancy tensor has negative elements")
    w = np.log(math.e + D)
    # ln(e) may round to 1 - ulp on some libms
    w[D == 0] = 1.0
    return w


def broadcast_weight(omega: np.ndarray, channels: int) -> np.ndarray:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    return np.repeat(omega[..., None], channels, axis=-1)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError("only P5 PGM files with maxval 255 are supported")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def export_heatmaps(values: np.ndarray, out_dir: str | os.PathLike, prefix: str = "frame") -> list[Path]:
    """One PGM per frame of ``values`` (F, H, W), each min-max normalised on its own.

    A ``ranges.txt`` sidecar records ``frame<TAB>min<TAB>max`` so the PGM levels
    can be mapped back to values. Frames with min == max render black.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    lines = ["frame\tmin\tmax"]
    for f, frame in enumerate(values):
        lo, hi = float(frame.min()), float(frame.max())
        if hi > lo:
            img = np.rint((frame - lo) / (hi - lo) * 255.0)
        else:
            img = np.zeros(frame.shape)
        p = out / f"{prefix}_{f:03d}.pgm"
        write_pgm(p, img)
        paths.append(p)
        lines.append(f"{f}\t{lo:.17g}\t{hi:.17g}")
    (out / "ranges.txt").write_text("\n".join(lines) + "\n")
    return paths
