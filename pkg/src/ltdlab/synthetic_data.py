"""Synthetic pixel videos and the fixed linear pseudo-encoder that maps them to latents."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ltdlab.tensor_core import InvalidShapeError, Rng

BACKGROUND = 0.1
FOREGROUND = 1.0


class InvalidSpecError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class SceneKind(enum.IntEnum):
    STATIC = 0
    MOVING_SQUARE = 1
    FLICKER = 2
    MIXED_SEGMENTS = 3


NUM_CLASSES = len(SceneKind)
NULL_CLASS = NUM_CLASSES


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic clip.

    ``velocity`` is (vx, vy) in pixels per frame, vx along the width axis.
    ``start`` is the square's initial top-left corner as (x, y); ``None`` draws it
    from the seed. For ``MIXED_SEGMENTS`` the frames are split at ``boundaries``
    into segments that alternate static / moving, starting static; the moving
    segments use ``fast_velocity``.
    """

    kind: SceneKind
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    square_size: int = 4
    velocity: tuple[int, int] = (1, 0)
    start: tuple[int, int] | None = None
    flicker_amplitude: float = 0.3
    flicker_period: float = 8.0
    boundaries: tuple[int, ...] = (4, 10)
    fast_velocity: tuple[int, int] = (5, 3)
    seed: int = 0

    def validate(self) -> None:
        for name in ("frames", "height", "width"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be positive")
        if self.channels not in (1, 3):
            raise InvalidSpecError("channels must be 1 or 3")
        if self.kind in (SceneKind.MOVING_SQUARE, SceneKind.MIXED_SEGMENTS, SceneKind.STATIC):
            if not 1 <= self.square_size <= min(self.height, self.width):
                raise InvalidSpecError("square_size must fit inside the frame")
            if self.start is not None:
                x, y = self.start
                if not (0 <= x <= self.width - self.square_size and 0 <= y <= self.height - self.square_size):
                    raise InvalidSpecError("start places the square outside the frame")
        if self.kind == SceneKind.FLICKER:
            if not 0.0 <= self.flicker_amplitude <= 0.5:
                raise InvalidSpecError("flicker_amplitude must lie in [0, 0.5]")
            if self.flicker_period <= 0:
                raise InvalidSpecError("flicker_period must be positive")
        if self.kind == SceneKind.MIXED_SEGMENTS:
            b = self.boundaries
            if not b or any(x >= y for x, y in zip(b, b[1:])) or b[0] <= 0 or b[-1] >= self.frames:
                raise InvalidSpecError("boundaries must be strictly increasing inside (0, frames)")


def _reflect(p: np.ndarray, hi: int) -> np.ndarray:
    """Fold unbounded positions into [0, hi] by bouncing off both walls."""
    if hi == 0:
        return np.zeros_like(p)
    period = 2 * hi
    q = np.mod(p, period)
    return np.where(q > hi, period - q, q)


def square_positions(spec: SceneSpec) -> np.ndarray:
    """Top-left (x, y) of the square for every frame, shape (F, 2)."""
    spec.validate()
    max_x = spec.width - spec.square_size
    max_y = spec.height - spec.square_size
    if spec.start is None:
        rng = Rng(spec.seed).stream(0)
        start = (int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1)))
    else:
        start = spec.start
    F = spec.frames
    if spec.kind == SceneKind.MOVING_SQUARE:
        vel = np.tile(np.asarray(spec.velocity), (F, 1))
        vel[0] = 0
    elif spec.kind == SceneKind.MIXED_SEGMENTS:
        vel = np.zeros((F, 2), dtype=int)
        edges = (0, *spec.boundaries, F)
        for seg, (a, b) in enumerate(zip(edges, edges[1:])):
            if seg % 2 == 1:
                vel[a:b] = spec.fast_velocity
        vel[0] = 0
    else:
        vel = np.zeros((F, 2), dtype=int)
    raw = np.asarray(start) + np.cumsum(vel, axis=0)
    return np.stack([_reflect(raw[:, 0], max_x), _reflect(raw[:, 1], max_y)], axis=1)


def generate(spec: SceneSpec) -> tuple[np.ndarray, int]:
    """Render ``spec`` into an (F, H, W, C) video in [0, 1] and its class label."""
    spec.validate()
    F, H, W, C = spec.frames, spec.height, spec.width, spec.channels
    if spec.kind == SceneKind.FLICKER:
        rng = Rng(spec.seed).stream(1)
        phase = 2.0 * np.pi * float(rng.uniform(1)[0])
        f = np.arange(F)
        level = 0.5 + spec.flicker_amplitude * np.sin(2.0 * np.pi * f / spec.flicker_period + phase)
        video = np.broadcast_to(level[:, None, None, None], (F, H, W, C)).copy()
        return np.clip(video, 0.0, 1.0), int(spec.kind)

    video = np.full((F, H, W, C), BACKGROUND)
    s = spec.square_size
    for i, (x, y) in enumerate(square_positions(spec)):
        video[i, y : y + s, x : x + s, :] = FOREGROUND
    return video, int(spec.kind)


@dataclass(frozen=True)
class EncoderConfig:
    temporal_factor: int = 2
    spatial_factor: int = 4
    latent_channels: int = 4

    def check(self, frames: int, height: int, width: int, channels: int) -> None:
        ft, fs = self.temporal_factor, self.spatial_factor
        if ft < 1 or fs < 1:
            raise InvalidConfigError("downsampling factors must be positive")
        if frames % ft:
            raise InvalidConfigError(f"temporal_factor {ft} does not divide frames {frames}")
        if height % fs or width % fs:
            raise InvalidConfigError(f"spatial_factor {fs} does not divide {height}x{width}")
        if self.latent_channels < channels:
            raise InvalidConfigError("latent_channels must be >= pixel channels")


# extra latent channels cycle through these filters over the pooled channels
_FILTERS = ("dt", "dx", "dy")


def _finite_difference(pooled: np.ndarray, kind: str) -> np.ndarray:
    # backward differences along (F, W, H); first slice is zero
    axis = {"dt": 0, "dx": 2, "dy": 1}[kind]
    out = np.zeros_like(pooled)
    n = pooled.shape[axis]
    if n > 1:
        hi = [slice(None)] * pooled.ndim
        lo = [slice(None)] * pooled.ndim
        hi[axis] = slice(1, n)
        lo[axis] = slice(0, n - 1)
        out[tuple(hi)] = pooled[tuple(hi)] - pooled[tuple(lo)]
    return out


def extra_channel_plan(channels: int, latent_channels: int) -> list[tuple[str, int]]:
    """(filter, source pooled channel) for every latent channel past the first ``channels``."""
    plan = []
    for k in range(latent_channels - channels):
        plan.append((_FILTERS[k % len(_FILTERS)], (k // len(_FILTERS)) % channels))
    return plan


def pseudo_encode(x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Block-average pool, then append finite-difference channels up to ``latent_channels``."""
    F, H, W, C = x.shape
    cfg.check(F, H, W, C)
    ft, fs = cfg.temporal_factor, cfg.spatial_factor
    pooled = x.reshape(F // ft, ft, H // fs, fs, W // fs, fs, C).mean(axis=(1, 3, 5))
    if cfg.latent_channels == C:
        return np.ascontiguousarray(pooled)
    extras = [_finite_difference(pooled[..., c], kind) for kind, c in extra_channel_plan(C, cfg.latent_channels)]
    return np.concatenate([pooled, np.stack(extras, axis=-1)], axis=-1)


def pseudo_decode(z: np.ndarray, cfg: EncoderConfig, pixel_shape: tuple[int, int, int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of the pooled channels back to ``pixel_shape``."""
    F, H, W, C = pixel_shape
    cfg.check(F, H, W, C)
    ft, fs = cfg.temporal_factor, cfg.spatial_factor
    expected = (F // ft, H // fs, W // fs, cfg.latent_channels)
    if z.shape != expected:
        raise InvalidShapeError(f"latent shape {z.shape} inconsistent with pixel shape {pixel_shape}: expected {expected}")
    up = z[..., :C].repeat(ft, axis=0).repeat(fs, axis=1).repeat(fs, axis=2)
    return np.clip(up, 0.0, 1.0)

