import math

import numpy as np
import pytest

from ltdlab.config import ExperimentConfig, load_config
from ltdlab.denoiser import load_checkpoint, loss_and_grad
from ltdlab.harness import (
    RunLog,
    StepRecord,
    build_corpus,
    compare_peaks,
    draw_batch,
    frame_profile,
    make_batch,
    peak_to_mean,
    pearson,
    report_frame_profile,
    report_heatmaps,
    run_training,
    schedule,
    write_corpus,
)
from ltdlab.ltd import LtdConfig, ltd_map, read_pgm
from ltdlab.synthetic_data import EncoderConfig, SceneKind, SceneSpec, generate, pseudo_encode, square_positions
from ltdlab.tensor_core import load_tensor

# pixel frames 4..9 move in the default MixedSegments clip -> latent frames 2..4
MOTION_LATENT_FRAMES = {2, 3, 4}


def test_corpus_caches_ltd(small_cfg):
    corpus = build_corpus(small_cfg)
    assert len(corpus.clips) == 3
    for c in corpus.clips:
        assert c.latent.shape == (8, 8, 8, 4)
        assert np.array_equal(c.ltd, ltd_map(c.latent, LtdConfig(3)))
        assert c.label == SceneKind.MIXED_SEGMENTS


def test_write_corpus_manifest(small_cfg, tmp_path):
    corpus = build_corpus(small_cfg)
    manifest = write_corpus(corpus, tmp_path / "data")
    rows = manifest.read_text().splitlines()
    assert rows[0] == "file\tkind\tlabel\tseed"
    assert len(rows) == 4
    name, kind, label, seed = rows[1].split("\t")
    assert (kind, label) == ("mixed_segments", "3")
    assert int(seed) == corpus.clips[0].spec.seed
    video = load_tensor(tmp_path / "data" / name)
    assert np.array_equal(video, corpus.clips[0].video.astype(np.float32))


def test_paired_runs_share_every_draw(small_cfg):
    log = run_training(small_cfg)
    base, ltd = log.mode("baseline"), log.mode("ltd")
    assert [r.draw_digest for r in base] == [r.draw_digest for r in ltd]
    assert len(set(r.draw_digest for r in base)) == len(base)
    # identical init and inputs: the first forward pass is the same in both runs
    assert np.array_equal(base[0].per_frame_loss, ltd[0].per_frame_loss)
    assert base[0].unweighted_loss == ltd[0].unweighted_loss


def test_static_corpus_ltd_trace_doubles(small_cfg):
    small_cfg.data.kind = "static"
    small_cfg.train.steps = 10
    log = run_training(small_cfg, write=False)
    base, ltd = log.mode("baseline"), log.mode("ltd")
    assert ltd[0].total_loss == pytest.approx(2 * base[0].total_loss, rel=1e-15)
    # Adam's epsilon makes a doubled gradient take a marginally different step
    for b, l in zip(base, ltd):
        assert l.total_loss == pytest.approx(2 * b.total_loss, rel=1e-6)


def test_early_per_frame_loss_peaks_in_motion_segment():
    cfg = load_config("configs/peak_reduction.conf")
    cfg.train.steps = 200
    cfg.train.mode = "baseline"
    prof = frame_profile(run_training(cfg, write=False), 100)
    assert int(np.argmax(prof.baseline_loss)) in MOTION_LATENT_FRAMES
    assert int(np.argmax(prof.mean_ltd)) in MOTION_LATENT_FRAMES


def test_runlog_roundtrip_and_files(small_cfg):
    log = run_training(small_cfg)
    out = small_cfg.out_dir
    back = RunLog.read(f"{out}/runlog.tsv")
    assert len(back.records) == len(log.records) == 12
    for a, b in zip(log.records, back.records):
        assert a.total_loss == b.total_loss
        assert np.array_equal(a.per_frame_loss, b.per_frame_loss)
    for mode in ("baseline", "ltd"):
        for step in (0, 2, 4):
            _, _, s = load_checkpoint(f"{out}/ckpt_{mode}_{step:06d}.ltdt")
            assert s == step
        assert load_checkpoint(f"{out}/ckpt_{mode}_final.ltdt")[2] == 6


def test_log_replay_from_checkpoint(small_cfg):
    log = run_training(small_cfg)
    corpus = build_corpus(small_cfg)
    sched = schedule(small_cfg)
    for mode in ("baseline", "ltd"):
        for rec in log.mode(mode):
            if rec.step % 2:
                continue
            params, _, _ = load_checkpoint(f"{small_cfg.out_dir}/ckpt_{mode}_{rec.step:06d}.ltdt")
            draw = draw_batch(small_cfg, corpus, rec.step, sched.T)
            assert draw.digest() == rec.draw_digest
            res = loss_and_grad(params, make_batch(corpus, draw), sched, use_ltd=(mode == "ltd"))
            assert res.loss == pytest.approx(rec.total_loss, rel=1e-12)
            assert res.unweighted_loss == pytest.approx(rec.unweighted_loss, rel=1e-12)


def test_runlog_rejects_non_increasing_steps():
    log = RunLog()
    rec = StepRecord(1, "baseline", 1.0, 1.0, 0.0, "x", np.ones(2), np.zeros(2))
    log.append(rec)
    with pytest.raises(ValueError):
        log.append(rec)


def test_setup_errors_before_compute(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = ExperimentConfig(out_dir=str(blocker / "sub"))
    with pytest.raises(OSError):
        run_training(cfg)
    cfg = ExperimentConfig()
    cfg.train.steps = 0
    with pytest.raises(ValueError):
        run_training(cfg, write=False)


def test_frame_report_static_corpus(small_cfg, tmp_path):
    small_cfg.data.kind = "static"
    log = run_training(small_cfg, write=False)
    prof = report_frame_profile(log, tmp_path, 3)
    assert not prof.mean_ltd.any()
    rows = (tmp_path / "frame_profile.csv").read_text().splitlines()
    assert rows[0] == "frame_index,mean_ltd,baseline_loss,ltd_loss"
    assert len(rows) == 9
    summary = (tmp_path / "frame_profile_summary.txt").read_text()
    assert "pearson.mean_ltd.baseline_loss = n/a" in summary


def test_frame_report_columns_average_to_logged_loss(small_cfg, tmp_path):
    log = run_training(small_cfg, write=False)
    report_frame_profile(log, tmp_path, 1)
    rows = [r.split(",") for r in (tmp_path / "frame_profile.csv").read_text().splitlines()[1:]]
    base = [float(r[2]) for r in rows]
    ltd = [float(r[3]) for r in rows]
    assert sum(base) / len(base) == pytest.approx(log.mode("baseline")[-1].unweighted_loss, rel=1e-12)
    assert sum(ltd) / len(ltd) == pytest.approx(log.mode("ltd")[-1].unweighted_loss, rel=1e-12)


def test_frame_report_single_mode_marks_missing_curve(small_cfg, tmp_path):
    small_cfg.train.mode = "baseline"
    report_frame_profile(run_training(small_cfg, write=False), tmp_path, 3)
    rows = (tmp_path / "frame_profile.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",n/a") for r in rows)


def test_frame_report_mixed_segments_ltd_argmax(small_cfg, tmp_path):
    prof = report_frame_profile(run_training(small_cfg, write=False), tmp_path, 6)
    assert int(np.argmax(prof.mean_ltd)) in MOTION_LATENT_FRAMES
    # oracle: LTD computed straight from the corpus
    corpus = build_corpus(small_cfg)
    direct = np.mean([c.ltd.mean(axis=(1, 2)) for c in corpus.clips], axis=0)
    assert int(np.argmax(direct)) in MOTION_LATENT_FRAMES


def test_frame_report_window_validation(small_cfg, tmp_path):
    log = run_training(small_cfg, write=False)
    with pytest.raises(ValueError):
        report_frame_profile(log, tmp_path, 0)
    with pytest.raises(ValueError):
        report_frame_profile(RunLog(), tmp_path, 3)


def test_csv_formatting_is_17_significant_digits(small_cfg, tmp_path):
    log = run_training(small_cfg, write=False)
    report_frame_profile(log, tmp_path, 3)
    cell = (tmp_path / "frame_profile.csv").read_text().splitlines()[1].split(",")[2]
    assert float(cell) == float(f"{float(cell):.17g}")
    assert cell == f"{float(cell):.17g}"


ENC = EncoderConfig()


def test_heatmaps_static_are_black(tmp_path):
    z = pseudo_encode(generate(SceneSpec(SceneKind.STATIC, seed=1))[0], ENC)
    paths = report_heatmaps(z, LtdConfig(), tmp_path)
    assert len(paths) == 8
    assert all(not read_pgm(p).any() for p in paths)


def _recovered(paths, out_dir):
    rows = [r.split("\t") for r in (out_dir / "ranges.txt").read_text().splitlines()[1:]]
    return [read_pgm(p) / 255.0 * (float(hi) - float(lo)) + float(lo) for p, (_, lo, hi) in zip(paths, rows)]


def test_heatmaps_track_moving_square(tmp_path):
    spec = SceneSpec(SceneKind.MOVING_SQUARE, square_size=4, velocity=(4, 0), start=(0, 12))
    z = pseudo_encode(generate(spec)[0], ENC)
    paths = report_heatmaps(z, LtdConfig(), tmp_path)
    xs = square_positions(spec)[:, 0]
    for f, path in enumerate(paths):
        # latent frames f-1..f+1 feed D_f; they pool pixel frames 2(f-1) .. 2(f+1)+1
        frames = range(max(0, 2 * (f - 1)), min(16, 2 * (f + 2)))
        visited = {int(xs[i]) // 4 for i in frames} | {(int(xs[i]) + 3) // 4 for i in frames}
        rows, cols = np.nonzero(read_pgm(path) == 255)
        assert set(rows.tolist()) == {3}
        assert set(cols.tolist()) <= visited


def test_heatmaps_flicker_uniform_nonzero(tmp_path):
    z = pseudo_encode(generate(SceneSpec(SceneKind.FLICKER, seed=2))[0], ENC)
    paths = report_heatmaps(z, LtdConfig(), tmp_path)
    for frame in _recovered(paths, tmp_path):
        assert frame.min() > 1.0
        assert frame.std() < 1e-9


def _log_with(base_curve, ltd_curve, steps=3):
    log = RunLog()
    for mode, curve in (("baseline", base_curve), ("ltd", ltd_curve)):
        for s in range(steps):
            c = np.asarray(curve, dtype=float)
            log.append(StepRecord(s, mode, 2 * c.mean(), c.mean(), 0.0, "d", c, np.zeros_like(c)))
    return log


def test_peaks_identical_traces():
    rep = compare_peaks(_log_with([1, 1, 3, 1], [1, 1, 3, 1]), 2)
    assert rep.reduction == 0.0


def test_peaks_flattened_ltd_curve():
    rep = compare_peaks(_log_with([1, 1, 3, 1], [1.2, 1.2, 2.0, 1.2]), 2)
    assert rep.baseline_ratio == pytest.approx(2.0)
    assert rep.reduction > 0


def test_peaks_multiple_seeds():
    logs = [_log_with([1, 1, 3, 1], [1, 1, 2, 1]), _log_with([1, 2, 1, 1], [1, 2, 1, 1])]
    for i, lg in enumerate(logs):
        lg.seed = i
    rep = compare_peaks(logs, 3)
    assert [p[0] for p in rep.per_seed] == [0, 1]
    assert rep.per_seed[1][3] == 0.0
    assert rep.reduction == pytest.approx(np.mean([p[3] for p in rep.per_seed]))


def test_peaks_missing_mode(small_cfg):
    small_cfg.train.mode = "ltd"
    with pytest.raises(ValueError, match="lacks"):
        compare_peaks(run_training(small_cfg, write=False))


def test_pearson_and_peak_helpers():
    x, y = np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.5])
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], rel=1e-12)
    assert pearson(np.zeros(3), np.arange(3.0)) is None
    assert peak_to_mean(np.array([1.0, 3.0])) == 1.5
    assert math.isnan(peak_to_mean(np.zeros(2)))
