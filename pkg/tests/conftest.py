import pytest

from ltdlab.config import ExperimentConfig


@pytest.fixture
def small_cfg(tmp_path):
    """Fast MixedSegments experiment writing into a temp dir."""
    cfg = ExperimentConfig(seed=3, out_dir=str(tmp_path / "run"))
    cfg.data.num_clips = 3
    cfg.model.hidden = 16
    cfg.train.steps = 6
    cfg.train.batch_size = 2
    cfg.train.lr = 1e-3
    cfg.train.checkpoint_every = 2
    cfg.report.window = 3
    return cfg


ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {name}: {detail}")
