"""Paired baseline / LTD training runs, run logs and the per-frame diagnostics."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ltdlab.config import ExperimentConfig
from ltdlab.denoiser import (
    AdamState,
    DenoiserArch,
    DenoiserParams,
    TrainExample,
    adam_step,
    init_params,
    loss_and_grad,
    save_checkpoint,
)
from ltdlab.diffusion import NoiseSchedule, make_linear_schedule
from ltdlab.ltd import LtdConfig, export_heatmaps, ltd_map, weight_map
from ltdlab.synthetic_data import NULL_CLASS, EncoderConfig, SceneSpec, generate, pseudo_encode
from ltdlab.tensor_core import Rng, sample_gaussian, save_tensor

MODES = ("baseline", "ltd")
LOG_COLUMNS = ("step", "mode", "total_loss", "unweighted_loss", "mean_ltd", "draw_digest", "per_frame_loss", "per_frame_ltd")

# master-seed stream ids
_STREAM_CLIPS = 1
_STREAM_INIT = 2
_STREAM_BATCH = 3


class NumericalError(RuntimeError):
    pass


def fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass
class ClipRecord:
    name: str
    spec: SceneSpec
    label: int
    video: np.ndarray
    latent: np.ndarray
    ltd: np.ndarray


@dataclass
class Corpus:
    clips: list[ClipRecord]

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return self.clips[0].latent.shape


def scene_spec(cfg: ExperimentConfig, kind, seed: int) -> SceneSpec:
    d = cfg.data
    return SceneSpec(
        kind=kind,
        frames=d.frames,
        height=d.height,
        width=d.width,
        channels=d.channels,
        square_size=d.square_size,
        velocity=tuple(d.velocity),
        flicker_amplitude=d.flicker_amplitude,
        flicker_period=d.flicker_period,
        boundaries=tuple(d.boundaries),
        fast_velocity=tuple(d.fast_velocity),
        seed=seed,
    )


def encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(e.temporal_factor, e.spatial_factor, e.latent_channels)


def ltd_config(cfg: ExperimentConfig) -> LtdConfig:
    return LtdConfig(cfg.ltd.tau, cfg.ltd.norm)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    """Generate, encode and cache the LTD map of every clip (LTD depends only on z_0)."""
    kinds = cfg.scene_kinds
    seeds = Rng(cfg.seed).stream(_STREAM_CLIPS).integers(0, 2**62, size=cfg.data.num_clips)
    enc, lcfg = encoder_config(cfg), ltd_config(cfg)
    clips = []
    for i in range(cfg.data.num_clips):
        spec = scene_spec(cfg, kinds[i % len(kinds)], int(seeds[i]))
        video, label = generate(spec)
        z = pseudo_encode(video, enc)
        clips.append(ClipRecord(f"clip_{i:03d}", spec, label, video, z, ltd_map(z, lcfg)))
    return Corpus(clips)


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> Path:
    """Pixel video, latent and LTD map per clip plus a tab-separated manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["file\tkind\tlabel\tseed"]
    for c in corpus.clips:
        save_tensor(c.video, out / f"{c.name}.ltdt")
        save_tensor(c.latent, out / f"{c.name}.latent.ltdt")
        save_tensor(c.ltd, out / f"{c.name}.ltd.ltdt")
        lines.append(f"{c.name}.ltdt\t{c.spec.kind.name.lower()}\t{c.label}\t{c.spec.seed}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class BatchDraw:
    clip_ids: np.ndarray
    timesteps: np.ndarray
    classes: np.ndarray
    noise: list[np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.clip_ids, self.timesteps, self.classes):
            h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
        for e in self.noise:
            h.update(np.ascontiguousarray(e, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def draw_batch(cfg: ExperimentConfig, corpus: Corpus, step: int, T: int) -> BatchDraw:
    """Every random draw of training step ``step``; identical for both loss modes."""
    rng = Rng(cfg.seed).stream(_STREAM_BATCH, step)
    B = cfg.train.batch_size
    ids = rng.integers(0, len(corpus.clips), size=B)
    ts = rng.integers(1, T + 1, size=B)
    drop = rng.uniform(B) < cfg.train.cond_dropout
    classes = np.array([NULL_CLASS if d else corpus.clips[i].label for i, d in zip(ids, drop)])
    noise = [sample_gaussian(rng.stream(k), corpus.geometry) for k in range(B)]
    return BatchDraw(ids, ts, classes, noise)


def make_batch(corpus: Corpus, draw: BatchDraw) -> list[TrainExample]:
    return [
        TrainExample(corpus.clips[i].latent, corpus.clips[i].ltd, int(t), e, int(c))
        for i, t, c, e in zip(draw.clip_ids, draw.timesteps, draw.classes, draw.noise)
    ]


@dataclass
class StepRecord:
    step: int
    mode: str
    total_loss: float
    unweighted_loss: float
    mean_ltd: float
    draw_digest: str
    per_frame_loss: np.ndarray
    per_frame_ltd: np.ndarray

    def row(self) -> str:
        return "\t".join(
            [
                str(self.step),
                self.mode,
                fmt(self.total_loss),
                fmt(self.unweighted_loss),
                fmt(self.mean_ltd),
                self.draw_digest,
                ",".join(fmt(x) for x in self.per_frame_loss),
                ",".join(fmt(x) for x in self.per_frame_ltd),
            ]
        )


@dataclass
class RunLog:
    records: list[StepRecord] = field(default_factory=list)
    seed: int = 0

    def append(self, rec: StepRecord) -> None:
        prev = [r.step for r in self.records if r.mode == rec.mode]
        if prev and rec.step <= prev[-1]:
            raise ValueError("steps must be strictly increasing within a mode")
        if not (math.isfinite(rec.total_loss) and math.isfinite(rec.unweighted_loss)):
            raise NumericalError(f"non-finite loss at step {rec.step} ({rec.mode})")
        self.records.append(rec)

    def mode(self, mode: str) -> list[StepRecord]:
        return [r for r in self.records if r.mode == mode]

    @property
    def modes(self) -> list[str]:
        return [m for m in MODES if any(r.mode == m for r in self.records)]

    def write(self, path: str | os.PathLike) -> None:
        lines = ["\t".join(LOG_COLUMNS)] + [r.row() for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunLog":
        log = cls()
        rows = Path(path).read_text().splitlines()
        if not rows or tuple(rows[0].split("\t")) != LOG_COLUMNS:
            raise ValueError(f"{path}: not a run log")
        for line in rows[1:]:
            f = line.split("\t")
            log.append(
                StepRecord(
                    int(f[0]),
                    f[1],
                    float(f[2]),
                    float(f[3]),
                    float(f[4]),
                    f[5],
                    np.array([float(x) for x in f[6].split(",")]),
                    np.array([float(x) for x in f[7].split(",")]),
                )
            )
        return log


def model_arch(cfg: ExperimentConfig, geometry) -> DenoiserArch:
    m = cfg.model
    return DenoiserArch(tuple(geometry), m.hidden, m.layers, m.time_dim, m.cond_dim)


def schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end)


def train_mode(
    cfg: ExperimentConfig,
    corpus: Corpus,
    mode: str,
    log: RunLog,
    out_dir: Path | None = None,
) -> DenoiserParams:
    sched = schedule(cfg)
    params = init_params(model_arch(cfg, corpus.geometry), Rng(cfg.seed).stream(_STREAM_INIT))
    state = AdamState.zeros(params.flat.size)
    every = cfg.train.checkpoint_every
    for step in range(cfg.train.steps):
        draw = draw_batch(cfg, corpus, step, sched.T)
        batch = make_batch(corpus, draw)
        if out_dir is not None and every and step % every == 0:
            save_checkpoint(out_dir / f"ckpt_{mode}_{step:06d}.ltdt", params, sched, step)
        res = loss_and_grad(params, batch, sched, use_ltd=(mode == "ltd"))
        ltds = np.stack([ex.D for ex in batch])
        log.append(
            StepRecord(
                step,
                mode,
                res.loss,
                res.unweighted_loss,
                float(ltds.mean()),
                draw.digest(),
                res.per_frame_loss,
                ltds.reshape(len(batch), ltds.shape[1], -1).mean(axis=(0, 2)),
            )
        )
        flat, state = adam_step(params.flat, res.grad, state, cfg.train.lr)
        params = params.with_flat(flat)
    if out_dir is not None:
        save_checkpoint(out_dir / f"ckpt_{mode}_final.ltdt", params, sched, cfg.train.steps)
    return params


def run_training(cfg: ExperimentConfig, write: bool = True, corpus: Corpus | None = None) -> RunLog:
    """Train the configured mode(s) with paired draws; writes logs and checkpoints to ``cfg.out_dir``."""
    cfg.validate()
    out = None
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
    if corpus is None:
        corpus = build_corpus(cfg)
    modes = MODES if cfg.train.mode == "both" else (cfg.train.mode,)
    log = RunLog(seed=cfg.seed)
    for mode in modes:
        train_mode(cfg, corpus, mode, log, out)
    if out is not None:
        log.write(out / "runlog.tsv")
    return log


def trailing(records: list[StepRecord], window: int) -> list[StepRecord]:
    if window < 1:
        raise ValueError("window must be >= 1")
    if not records:
        raise ValueError("no records in window")
    return records[-window:]


def peak_to_mean(curve: np.ndarray) -> float:
    m = float(np.mean(curve))
    return float(np.max(curve)) / m if m > 0 else float("nan")


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation, or ``None`` when either input is constant."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    y = np.asarray(y, dtype=float) - np.mean(y)
    sx, sy = math.sqrt(float(x @ x)), math.sqrt(float(y @ y))
    if sx == 0 or sy == 0:
        return None
    return float(x @ y) / (sx * sy)


@dataclass
class FrameProfile:
    mean_ltd: np.ndarray
    baseline_loss: np.ndarray | None
    ltd_loss: np.ndarray | None

    def summary(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {"peak_to_mean.mean_ltd": peak_to_mean(self.mean_ltd) if self.mean_ltd.any() else None}
        for name in ("baseline_loss", "ltd_loss"):
            curve = getattr(self, name)
            out[f"peak_to_mean.{name}"] = None if curve is None else peak_to_mean(curve)
        out["pearson.mean_ltd.baseline_loss"] = None if self.baseline_loss is None else pearson(self.mean_ltd, self.baseline_loss)
        return out


def frame_profile(log: RunLog, window: int) -> FrameProfile:
    if not log.records:
        raise ValueError("empty run log")
    curves = {}
    ltd_rows = None
    for mode in MODES:
        recs = log.mode(mode)
        if recs:
            recs = trailing(recs, window)
            curves[mode] = np.mean([r.per_frame_loss for r in recs], axis=0)
            if ltd_rows is None:
                ltd_rows = recs
    mean_ltd = np.mean([r.per_frame_ltd for r in ltd_rows], axis=0)
    return FrameProfile(mean_ltd, curves.get("baseline"), curves.get("ltd"))


def _cell(x) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else fmt(x)


def report_frame_profile(log: RunLog, out_dir: str | os.PathLike, window: int) -> FrameProfile:
    """Write ``frame_profile.csv`` and ``frame_profile_summary.txt``."""
    prof = frame_profile(log, window)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["frame_index,mean_ltd,baseline_loss,ltd_loss"]
    for f in range(len(prof.mean_ltd)):
        b = None if prof.baseline_loss is None else prof.baseline_loss[f]
        l = None if prof.ltd_loss is None else prof.ltd_loss[f]
        lines.append(f"{f},{fmt(prof.mean_ltd[f])},{_cell(b)},{_cell(l)}")
    (out / "frame_profile.csv").write_text("\n".join(lines) + "\n")
    summary = [f"window = {window}"] + [f"{k} = {_cell(v)}" for k, v in prof.summary().items()]
    (out / "frame_profile_summary.txt").write_text("\n".join(summary) + "\n")
    return prof


def report_heatmaps(latent: np.ndarray, cfg: LtdConfig, out_dir: str | os.PathLike) -> list[Path]:
    """Per-frame PGM renderings of ``ln(e + D)`` with a normalisation sidecar."""
    return export_heatmaps(weight_map(ltd_map(latent, cfg)), out_dir, prefix="ltd")


@dataclass
class PeakReport:
    baseline_ratio: float
    ltd_ratio: float
    reduction: float
    per_seed: list[tuple[int, float, float, float]]

    def lines(self) -> list[str]:
        out = ["seed,baseline_ratio,ltd_ratio,reduction"]
        out += [f"{s},{fmt(b)},{fmt(l)},{fmt(r)}" for s, b, l, r in self.per_seed]
        out.append(f"mean,{fmt(self.baseline_ratio)},{fmt(self.ltd_ratio)},{fmt(self.reduction)}")
        return out


def compare_peaks(logs: RunLog | list[RunLog], window: int = 50) -> PeakReport:
    """Peak-to-mean ratio of the trailing-window per-frame loss, baseline vs LTD.

    ``reduction`` is baseline minus LTD; positive means LTD flattened the profile.
    """
    if isinstance(logs, RunLog):
        logs = [logs]
    per_seed = []
    for log in logs:
        missing = [m for m in MODES if not log.mode(m)]
        if missing:
            raise ValueError(f"run log (seed {log.seed}) lacks mode(s) {missing}")
        prof = frame_profile(log, window)
        b, l = peak_to_mean(prof.baseline_loss), peak_to_mean(prof.ltd_loss)
        per_seed.append((log.seed, b, l, b - l))
    b = float(np.mean([p[1] for p in per_seed]))
    l = float(np.mean([p[2] for p in per_seed]))
    return PeakReport(b, l, b - l, per_seed)
