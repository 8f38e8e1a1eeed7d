"""Per-voxel conditional MLP noise predictor with exact reverse-mode gradients.

Every latent voxel is an independent row: its ``C_l`` channel values, a fixed
sinusoidal embedding of the timestep and a learned class embedding go through
``layers`` tanh hidden layers and a linear head with ``C_l`` outputs.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ltdlab.diffusion import NoiseSchedule, loss_weights, make_linear_schedule, q_sample
from ltdlab.synthetic_data import NUM_CLASSES
from ltdlab.tensor_core import InvalidShapeError, Rng, load_tensor, sample_gaussian, save_tensor


@dataclass(frozen=True)
class DenoiserArch:
    geometry: tuple[int, int, int, int] = (8, 8, 8, 4)
    hidden: int = 64
    layers: int = 2
    time_dim: int = 16
    cond_dim: int = 8
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(int(g) for g in self.geometry))
        if len(self.geometry) != 4 or min(self.geometry) < 1:
            raise ValueError(f"bad geometry {self.geometry}")
        for name in ("hidden", "layers", "time_dim", "cond_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def channels(self) -> int:
        return self.geometry[3]

    @property
    def input_dim(self) -> int:
        return self.channels + self.time_dim + self.cond_dim

    def blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        out = [("cond_table", (self.num_classes + 1, self.cond_dim))]
        fan_in = self.input_dim
        for i in range(self.layers):
            out += [(f"w{i}", (fan_in, self.hidden)), (f"b{i}", (self.hidden,))]
            fan_in = self.hidden
        out += [("w_out", (fan_in, self.channels)), ("b_out", (self.channels,))]
        return out


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def layout(arch: DenoiserArch) -> dict[str, Block]:
    table = {}
    off = 0
    for name, shape in arch.blocks():
        b = Block(name, off, shape)
        table[name] = b
        off += b.size
    return table


def num_params(arch: DenoiserArch) -> int:
    return sum(b.size for b in layout(arch).values())


@dataclass
class DenoiserParams:
    arch: DenoiserArch
    flat: np.ndarray
    layout: dict[str, Block] = field(init=False, repr=False)

    def __post_init__(self):
        self.layout = layout(self.arch)
        if self.flat.shape != (num_params(self.arch),):
            raise InvalidShapeError(f"expected {num_params(self.arch)} parameters, got {self.flat.shape}")

    def view(self, name: str, vec: np.ndarray | None = None) -> np.ndarray:
        b = self.layout[name]
        src = self.flat if vec is None else vec
        return src[b.offset : b.offset + b.size].reshape(b.shape)

    def with_flat(self, flat: np.ndarray) -> "DenoiserParams":
        return DenoiserParams(self.arch, flat)


def init_params(arch: DenoiserArch, rng: Rng) -> DenoiserParams:
    """Weights ~ N(0, 1/fan_in), biases 0, embedding table ~ N(0, 0.02^2)."""
    flat = np.zeros(num_params(arch))
    p = DenoiserParams(arch, flat)
    for i, (name, shape) in enumerate(arch.blocks()):
        if name.startswith("b"):
            continue
        noise = sample_gaussian(rng.stream(i), shape)
        std = 0.02 if name == "cond_table" else 1.0 / math.sqrt(shape[0])
        p.view(name)[...] = std * noise
    return p


def time_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _check_geometry(arch: DenoiserArch, z: np.ndarray) -> None:
    if z.shape != arch.geometry:
        raise InvalidShapeError(f"latent shape {z.shape} does not match model geometry {arch.geometry}")


def _context(params: DenoiserParams, t: int, c: int) -> np.ndarray:
    """Per-example part of the input row: time embedding then class embedding."""
    return np.concatenate([time_embedding(t, params.arch.time_dim), params.view("cond_table")[c]])


def _mlp_forward(params: DenoiserParams, zs: list[np.ndarray], ts: list[int], cs: list[int]):
    """Run the MLP over every voxel row of every latent in ``zs``.

    The first layer is split as ``vox @ W0[:C] + ctx @ W0[C:]`` so each
    example's context is projected once instead of once per voxel.
    """
    arch = params.arch
    C = arch.channels
    w0 = params.view("w0")
    vox, ctx_proj, ctxs = [], [], []
    for z, t, c in zip(zs, ts, cs):
        _check_geometry(arch, z)
        ctx = _context(params, t, c)
        ctxs.append(ctx)
        vox.append(z.reshape(-1, C))
        ctx_proj.append(ctx @ w0[C:])
    n = vox[0].shape[0]
    x = np.concatenate(vox, axis=0)
    pre = x @ w0[:C] + np.repeat(np.stack(ctx_proj), n, axis=0) + params.view("b0")
    h = np.tanh(pre)
    acts = [x, h]
    for i in range(1, arch.layers):
        h = np.tanh(h @ params.view(f"w{i}") + params.view(f"b{i}"))
        acts.append(h)
    out = h @ params.view("w_out") + params.view("b_out")
    return out, acts, np.stack(ctxs)


def forward(params: DenoiserParams, z_t: np.ndarray, t: int, c: int) -> np.ndarray:
    """Predicted noise for one latent; same shape as ``z_t``."""
    out, _, _ = _mlp_forward(params, [z_t], [t], [c])
    return out.reshape(z_t.shape)


class Denoiser:
    """Callable ``(z_t, t, c) -> eps`` handle used by the sampler."""

    def __init__(self, params: DenoiserParams):
        self.params = params

    def __call__(self, z_t: np.ndarray, t: int, c: int) -> np.ndarray:
        return forward(self.params, z_t, t, c)


@dataclass(frozen=True)
class TrainExample:
    z0: np.ndarray
    D: np.ndarray
    t: int
    eps: np.ndarray
    c: int


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    unweighted_loss: float
    per_frame_loss: np.ndarray


def _check_batch(arch: DenoiserArch, batch: list[TrainExample], sched: NoiseSchedule) -> None:
    if not batch:
        raise ValueError("empty batch")
    for ex in batch:
        _check_geometry(arch, ex.z0)
        if ex.eps.shape != ex.z0.shape:
            raise InvalidShapeError("noise shape does not match latent")
        if ex.D.shape != ex.z0.shape[:3]:
            raise InvalidShapeError("discrepancy shape does not match latent")
        if not 1 <= ex.t <= sched.T:
            raise ValueError(f"timestep {ex.t} outside [1, {sched.T}]")


def batch_predictions(params: DenoiserParams, batch: list[TrainExample], sched: NoiseSchedule) -> np.ndarray:
    """Stacked ``eps_pred`` for every example, shape (B, F, H, W, C)."""
    zts = [q_sample(ex.z0, ex.t, ex.eps, sched) for ex in batch]
    out, _, _ = _mlp_forward(params, zts, [ex.t for ex in batch], [ex.c for ex in batch])
    return out.reshape((len(batch),) + params.arch.geometry)


def loss_and_grad(
    params: DenoiserParams,
    batch: list[TrainExample],
    sched: NoiseSchedule,
    use_ltd: bool,
    weights: np.ndarray | None = None,
) -> LossResult:
    """Batch-mean loss and its exact gradient with respect to ``params.flat``.

    ``weights`` overrides the per-element weights (shape (B, F, H, W, C)); by
    default they are ``1 + ln(e + D)`` with ``use_ltd`` and 1 otherwise. The
    weights are constants: no gradient flows through ``D``.
    """
    arch = params.arch
    _check_batch(arch, batch, sched)
    B = len(batch)
    F, H, W, C = arch.geometry
    zts = [q_sample(ex.z0, ex.t, ex.eps, sched) for ex in batch]
    out, acts, ctxs = _mlp_forward(params, zts, [ex.t for ex in batch], [ex.c for ex in batch])
    pred = out.reshape((B, F, H, W, C))
    eps = np.stack([ex.eps for ex in batch])
    r = pred - eps
    err = r * r
    if weights is None:
        if use_ltd:
            weights = np.stack([loss_weights(ex.D, C) for ex in batch])
        else:
            weights = np.ones_like(err)
    elif weights.shape != err.shape:
        raise InvalidShapeError(f"weights shape {weights.shape} does not match {err.shape}")
    n = err[0].size
    per_example = (weights * err).reshape(B, -1).mean(axis=1)
    loss = float(np.mean(per_example))
    unweighted = float(np.mean(err.reshape(B, -1).mean(axis=1)))
    per_frame = err.reshape(B, F, -1).mean(axis=2).mean(axis=0)

    grad = np.zeros_like(params.flat)
    g_out = (2.0 / (B * n)) * (weights * r).reshape(-1, C)
    h_last = acts[-1]
    params.view("w_out", grad)[...] = h_last.T @ g_out
    params.view("b_out", grad)[...] = g_out.sum(axis=0)
    g = g_out @ params.view("w_out").T
    for i in reversed(range(1, arch.layers)):
        g = g * (1.0 - acts[i + 1] ** 2)
        params.view(f"w{i}", grad)[...] = acts[i].T @ g
        params.view(f"b{i}", grad)[...] = g.sum(axis=0)
        g = g @ params.view(f"w{i}").T
    g = g * (1.0 - acts[1] ** 2)
    # context columns are constant within an example, so their rows see summed gradients
    g_ex = g.reshape(B, -1, g.shape[1]).sum(axis=1)
    w0_grad = params.view("w0", grad)
    w0_grad[:C] = acts[0].T @ g
    w0_grad[C:] = ctxs.T @ g_ex
    params.view("b0", grad)[...] = g_ex.sum(axis=0)
    g_cond = g_ex @ params.view("w0")[C + arch.time_dim :].T
    table_grad = params.view("cond_table", grad)
    for k, ex in enumerate(batch):
        table_grad[ex.c] += g_cond[k]
    return LossResult(loss, grad, unweighted, per_frame)


def loss_only(params: DenoiserParams, batch: list[TrainExample], sched: NoiseSchedule, use_ltd: bool) -> float:
    B = len(batch)
    pred = batch_predictions(params, batch, sched)
    eps = np.stack([ex.eps for ex in batch])
    err = (pred - eps) ** 2
    if use_ltd:
        err = err * np.stack([loss_weights(ex.D, params.arch.channels) for ex in batch])
    return float(np.mean(err.reshape(B, -1).mean(axis=1)))


def finite_diff_check(
    params: DenoiserParams,
    batch: list[TrainExample],
    sched: NoiseSchedule,
    use_ltd: bool,
    num_coords: int,
    h: float,
    rng: Rng,
) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    if num_coords > params.flat.size:
        raise ValueError("num_coords exceeds parameter count")
    analytic = loss_and_grad(params, batch, sched, use_ltd).grad
    coords = np.sort(rng.uniform(params.flat.size).argsort()[:num_coords])
    worst = 0.0
    for i in coords:
        plus = params.flat.copy()
        minus = params.flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (loss_only(params.with_flat(plus), batch, sched, use_ltd) - loss_only(params.with_flat(minus), batch, sched, use_ltd)) / (2 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    flat: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    if flat.shape != grad.shape or grad.shape != state.m.shape:
        raise InvalidShapeError("parameter, gradient and state shapes differ")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return flat - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


def save_checkpoint(path: str | os.PathLike, params: DenoiserParams, sched: NoiseSchedule, step: int) -> None:
    """Params as a float64 ``.ltdt`` file plus a ``<path>.txt`` key=value header."""
    path = Path(path)
    save_tensor(params.flat, path, exact=True)
    a = params.arch
    lines = [
        f"geometry = {','.join(str(g) for g in a.geometry)}",
        f"hidden = {a.hidden}",
        f"layers = {a.layers}",
        f"time_dim = {a.time_dim}",
        f"cond_dim = {a.cond_dim}",
        f"num_classes = {a.num_classes}",
        f"schedule.T = {sched.T}",
        f"schedule.beta_start = {sched.beta_start!r}",
        f"schedule.beta_end = {sched.beta_end!r}",
        f"step = {step}",
    ]
    Path(str(path) + ".txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[DenoiserParams, NoiseSchedule, int]:
    header = {}
    for line in Path(str(path) + ".txt").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
    arch = DenoiserArch(
        geometry=tuple(int(g) for g in header["geometry"].split(",")),
        hidden=int(header["hidden"]),
        layers=int(header["layers"]),
        time_dim=int(header["time_dim"]),
        cond_dim=int(header["cond_dim"]),
        num_classes=int(header["num_classes"]),
    )
    sched = make_linear_schedule(
        int(header["schedule.T"]), float(header["schedule.beta_start"]), float(header["schedule.beta_end"])
    )
    params = DenoiserParams(arch, load_tensor(path))
    return params, sched, int(header["step"])
