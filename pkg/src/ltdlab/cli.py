"""Command line entry point: ``ltdlab {gen-data,ltd-map,train,sample,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ltdlab.config import ConfigError, load_config
from ltdlab.denoiser import Denoiser, load_checkpoint
from ltdlab.diffusion import InvalidConfigError as DiffusionConfigError
from ltdlab.diffusion import SamplerConfig, ddim_sample
from ltdlab.harness import (
    NumericalError,
    RunLog,
    build_corpus,
    compare_peaks,
    report_frame_profile,
    report_heatmaps,
    run_training,
    write_corpus,
)
from ltdlab.ltd import LtdConfig, export_heatmaps, ltd_map, weight_map
from ltdlab.synthetic_data import EncoderConfig, InvalidConfigError, InvalidSpecError, pseudo_decode
from ltdlab.tensor_core import FormatError, InvalidShapeError, Rng, load_tensor, save_tensor

log = logging.getLogger("ltdlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config, _overrides(args.set))
    manifest = write_corpus(build_corpus(cfg), args.out)
    log.info("wrote %s", manifest)


def cmd_ltd_map(args) -> None:
    z = load_tensor(args.input)
    if z.ndim != 4:
        raise InvalidShapeError(f"{args.input}: expected a rank-4 latent, got shape {z.shape}")
    D = ltd_map(z, LtdConfig(args.tau, args.norm))
    save_tensor(D, args.out)
    w = weight_map(D)
    if args.weights:
        save_tensor(w, args.weights)
    if args.heatmap:
        export_heatmaps(w, args.heatmap, prefix="ltd")


def cmd_train(args) -> None:
    over = _overrides(args.set)
    if args.mode:
        over["train.mode"] = args.mode
    if args.out:
        over["out_dir"] = args.out
    cfg = load_config(args.config, over)
    runlog = run_training(cfg)
    for mode in runlog.modes:
        last = runlog.mode(mode)[-1]
        log.info("%s: final loss %.6g (unweighted %.6g)", mode, last.total_loss, last.unweighted_loss)


def cmd_sample(args) -> None:
    params, sched, _ = load_checkpoint(args.checkpoint)
    cfg = SamplerConfig(args.steps, args.guidance)
    z = ddim_sample(Denoiser(params), params.arch.geometry, args.class_label, cfg, sched, Rng(args.seed))
    if not np.all(np.isfinite(z)):
        raise NumericalError("sample contains non-finite values")
    save_tensor(z, args.out)
    if args.decode:
        enc = EncoderConfig(args.temporal_factor, args.spatial_factor, params.arch.channels)
        F, H, W, _ = params.arch.geometry
        shape = (F * args.temporal_factor, H * args.spatial_factor, W * args.spatial_factor, args.pixel_channels)
        save_tensor(pseudo_decode(z, enc, shape), args.decode)


def cmd_report(args) -> None:
    if args.kind == "frames":
        prof = report_frame_profile(RunLog.read(Path(args.run) / "runlog.tsv"), args.out, args.window)
        log.info("%s", prof.summary())
    elif args.kind == "heatmaps":
        report_heatmaps(load_tensor(args.latent), LtdConfig(args.tau, args.norm), args.out)
    else:
        logs = []
        for i, run in enumerate(args.runs):
            rl = RunLog.read(Path(run) / "runlog.tsv")
            rl.seed = i
            logs.append(rl)
        report = compare_peaks(logs, args.window)
        text = "\n".join(report.lines()) + "\n"
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text)
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ltdlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and encode a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ltd-map", help="discrepancy map of a latent file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--tau", type=int, default=3)
    p.add_argument("--norm", choices=("l2", "l1"), default="l2")
    p.add_argument("--out", required=True)
    p.add_argument("--weights")
    p.add_argument("--heatmap")
    p.set_defaults(func=cmd_ltd_map)

    p = sub.add_parser("train", help="train baseline and/or LTD models")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("baseline", "ltd", "both"))
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="DDIM sample from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--decode")
    p.add_argument("--temporal-factor", type=int, default=2)
    p.add_argument("--spatial-factor", type=int, default=4)
    p.add_argument("--pixel-channels", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("report", help="frame profile, heatmaps or peak comparison")
    rsub = p.add_subparsers(dest="kind", required=True)
    r = rsub.add_parser("frames")
    r.add_argument("--run", required=True, help="training output directory")
    r.add_argument("--out", required=True)
    r.add_argument("--window", type=int, default=50)
    r = rsub.add_parser("heatmaps")
    r.add_argument("--latent", required=True)
    r.add_argument("--tau", type=int, default=3)
    r.add_argument("--norm", choices=("l2", "l1"), default="l2")
    r.add_argument("--out", required=True)
    r = rsub.add_parser("peaks")
    r.add_argument("runs", nargs="+", help="training output directories, one per seed")
    r.add_argument("--window", type=int, default=50)
    r.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, InvalidSpecError, InvalidConfigError, DiffusionConfigError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (InvalidShapeError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
