import numpy as np
import pytest

from ltdlab.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from ltdlab.config import ConfigError, load_config, parse_config
from ltdlab.ltd import LtdConfig, ltd_map, read_pgm, weight_map
from ltdlab.synthetic_data import EncoderConfig, SceneKind, SceneSpec, generate, pseudo_encode
from ltdlab.tensor_core import load_tensor, save_tensor

SMALL = [
    "--set", "data.num_clips=2",
    "--set", "model.hidden=8",
    "--set", "train.steps=3",
    "--set", "train.batch_size=1",
    "--set", "train.lr=0.001",
]


def test_parse_dotted_keys():
    cfg = parse_config("seed = 9\nltd.tau = 5  # comment\ndata.boundaries = 2, 6\n\nltd.norm = l1\n")
    assert cfg.seed == 9
    assert cfg.ltd.tau == 5
    assert cfg.ltd.norm == "l1"
    assert cfg.data.boundaries == (2, 6)


@pytest.mark.parametrize("text", ["ltd.window = 3", "bogus = 1", "ltd = 3", "data.kind.x = 1"])
def test_unknown_keys_rejected(text):
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(text)


def test_bad_value_and_syntax():
    with pytest.raises(ConfigError, match="ltd.tau"):
        parse_config("ltd.tau = three")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("ltd.tau 3")


def test_env_seed_override(tmp_path, monkeypatch):
    path = tmp_path / "c.conf"
    path.write_text("seed = 1\n")
    monkeypatch.setenv("LTD_SEED", "77")
    assert load_config(path).seed == 77
    monkeypatch.setenv("LTD_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(path)


def test_validation():
    with pytest.raises(ConfigError):
        load_config(None, {"train.mode": "other"})
    with pytest.raises(ConfigError):
        load_config(None, {"data.kind": "tornado"})


def test_shipped_config_parses():
    cfg = load_config("configs/peak_reduction.conf")
    assert cfg.train.steps == 2000
    assert cfg.scene_kinds == [SceneKind.MIXED_SEGMENTS]


def test_gen_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "data.num_clips=2"]) == EXIT_OK
    rows = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()
    assert len(rows) == 3
    assert load_tensor(tmp_path / "d" / "clip_000.ltdt").shape == (16, 32, 32, 1)
    assert load_tensor(tmp_path / "d" / "clip_000.latent.ltdt").shape == (8, 8, 8, 4)


def test_ltd_map_command(tmp_path):
    z = pseudo_encode(generate(SceneSpec(SceneKind.MOVING_SQUARE, seed=1))[0], EncoderConfig())
    save_tensor(z, tmp_path / "z.ltdt")
    args = ["ltd-map", "--in", str(tmp_path / "z.ltdt"), "--tau", "3", "--norm", "l2", "--out", str(tmp_path / "d.ltdt"),
            "--weights", str(tmp_path / "w.ltdt"), "--heatmap", str(tmp_path / "hm")]
    assert main(args) == EXIT_OK
    z32 = load_tensor(tmp_path / "z.ltdt")
    D = ltd_map(z32, LtdConfig(3))
    assert np.array_equal(load_tensor(tmp_path / "d.ltdt"), D.astype(np.float32))
    assert np.array_equal(load_tensor(tmp_path / "w.ltdt"), weight_map(D).astype(np.float32))
    assert read_pgm(tmp_path / "hm" / "ltd_000.pgm").shape == (8, 8)
    assert (tmp_path / "hm" / "ranges.txt").exists()


def test_train_sample_and_reports(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--mode", "both", "--out", str(run), *SMALL]) == EXIT_OK
    assert (run / "runlog.tsv").exists()
    ckpt = run / "ckpt_ltd_final.ltdt"
    args = ["sample", "--checkpoint", str(ckpt), "--class", "3", "--steps", "5", "--guidance", "7.5", "--seed", "4",
            "--out", str(tmp_path / "s.ltdt"), "--decode", str(tmp_path / "v.ltdt")]
    assert main(args) == EXIT_OK
    assert load_tensor(tmp_path / "s.ltdt").shape == (8, 8, 8, 4)
    video = load_tensor(tmp_path / "v.ltdt")
    assert video.shape == (16, 32, 32, 1)
    assert video.min() >= 0 and video.max() <= 1

    assert main(["report", "frames", "--run", str(run), "--out", str(tmp_path / "rep"), "--window", "2"]) == EXIT_OK
    assert (tmp_path / "rep" / "frame_profile.csv").exists()
    assert main(["report", "peaks", str(run), str(run), "--window", "2", "--out", str(tmp_path / "rep" / "peaks.csv")]) == EXIT_OK
    lines = (tmp_path / "rep" / "peaks.csv").read_text().splitlines()
    assert lines[0] == "seed,baseline_ratio,ltd_ratio,reduction"
    assert len(lines) == 4

    save_tensor(load_tensor(tmp_path / "s.ltdt"), tmp_path / "lat.ltdt")
    assert main(["report", "heatmaps", "--latent", str(tmp_path / "lat.ltdt"), "--out", str(tmp_path / "hm")]) == EXIT_OK
    assert len(list((tmp_path / "hm").glob("*.pgm"))) == 8


def test_exit_code_config_error(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("nope.key = 1\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_exit_code_io_error(tmp_path):
    assert main(["ltd-map", "--in", str(tmp_path / "missing.ltdt"), "--out", str(tmp_path / "d.ltdt")]) == EXIT_IO
    (tmp_path / "bad.ltdt").write_bytes(b"XXXX\x01\x01\x00\x00")
    assert main(["ltd-map", "--in", str(tmp_path / "bad.ltdt"), "--out", str(tmp_path / "d.ltdt")]) == EXIT_IO


def test_exit_code_numerical_failure(tmp_path):
    # a huge learning rate drives the loss to overflow
    args = ["train", "--mode", "baseline", "--out", str(tmp_path / "r"), "--set", "train.lr=1e200",
            "--set", "train.steps=5", "--set", "data.num_clips=1", "--set", "model.hidden=4", "--set", "train.batch_size=1"]
    with np.errstate(all="ignore"):
        assert main(args) == EXIT_NUMERICAL
