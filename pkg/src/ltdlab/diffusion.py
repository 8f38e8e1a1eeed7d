"""Forward noising, the plain and LTD-weighted objectives, and a guided DDIM sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ltdlab.ltd import broadcast_weight, weight_map
from ltdlab.synthetic_data import NULL_CLASS
from ltdlab.tensor_core import InvalidShapeError, Rng, sample_gaussian


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep arrays indexed by ``t - 1`` for ``t = 1..T``."""

    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """ᾱ_t with the convention ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, beta_start=beta_start, beta_end=beta_end)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if z0.shape != eps.shape:
        raise InvalidShapeError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    a = sched.abar(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def diffusion_loss(eps: np.ndarray, eps_pred: np.ndarray) -> float:
    if eps.shape != eps_pred.shape:
        raise InvalidShapeError(f"shape mismatch: {eps.shape} vs {eps_pred.shape}")
    r = eps - eps_pred
    return float(np.mean(r * r))


def loss_weights(D: np.ndarray, channels: int) -> np.ndarray:
    """Total per-element weight ``1 + ln(e + D)`` broadcast over channels."""
    return 1.0 + broadcast_weight(weight_map(D), channels)


def ltd_loss(eps: np.ndarray, eps_pred: np.ndarray, D: np.ndarray) -> tuple[float, float]:
    """Return ``(total, unweighted)``; the weights are treated as constants."""
    if eps.shape != eps_pred.shape:
        raise InvalidShapeError(f"shape mismatch: {eps.shape} vs {eps_pred.shape}")
    if eps.ndim != 4 or D.shape != eps.shape[:3]:
        raise InvalidShapeError(f"discrepancy shape {D.shape} does not match latent {eps.shape}")
    r = eps - eps_pred
    err = r * r
    total = float(np.mean(loss_weights(D, eps.shape[-1]) * err))
    return total, float(np.mean(err))


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 7.5


def ddim_timesteps(num_steps: int, T: int) -> list[int]:
    """Evenly spaced timesteps over [1, T], rounded, deduplicated, descending."""
    if num_steps < 1 or num_steps > T:
        raise InvalidConfigError(f"num_steps must lie in [1, {T}]")
    ts = np.rint(np.linspace(1, T, num_steps)).astype(int)
    out = sorted(set(int(t) for t in ts), reverse=True)
    if not out:
        raise InvalidConfigError("empty timestep subsequence")
    return out


def guided_noise(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def predict_z0(z_t: np.ndarray, eps_hat: np.ndarray, abar: float) -> np.ndarray:
    return (z_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, abar_t: float, abar_next: float) -> tuple[np.ndarray, np.ndarray]:
    """One η = 0 update; returns ``(z_next, z0_hat)``."""
    z0_hat = predict_z0(z_t, eps_hat, abar_t)
    return math.sqrt(abar_next) * z0_hat + math.sqrt(1.0 - abar_next) * eps_hat, z0_hat


Model = Callable[[np.ndarray, int, int], np.ndarray]


def ddim_sample(
    model: Model,
    shape: tuple[int, ...],
    cond: int,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: Rng,
    null_class: int = NULL_CLASS,
    trace: list | None = None,
) -> np.ndarray:
    """Deterministic DDIM from ``z_T ~ N(0, I)`` to ``z_0`` with classifier-free guidance.

    If ``trace`` is a list, the ẑ_0 estimate of every step is appended to it.
    """
    if cfg.guidance_scale < 0:
        raise InvalidConfigError("guidance_scale must be >= 0")
    ts = ddim_timesteps(cfg.num_steps, sched.T)
    z = sample_gaussian(rng, shape)
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        eps_u = model(z, t, null_class)
        if cfg.guidance_scale == 0:
            eps_hat = eps_u
        else:
            eps_hat = guided_noise(eps_u, model(z, t, cond), cfg.guidance_scale)
        z, z0_hat = ddim_step(z, eps_hat, sched.abar(t), sched.abar(t_next))
        if trace is not None:
            trace.append(z0_hat)
    return z
