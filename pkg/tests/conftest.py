import sys
import shutil

import numpy as np
import pytest

from sdat.config import ExperimentConfig
from sdat.pipeline import Pipeline


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def balanced_run(tmp_path_factory):
    """Default pipeline (pretrain 0.9/0.1, target 0.5/0.5), run once per session."""
    out = tmp_path_factory.mktemp("balanced")
    cfg = ExperimentConfig(out_dir=str(out))
    report = Pipeline(cfg, out).run()
    return out, report


@pytest.fixture(scope="session")
def balanced_run_copy(balanced_run, tmp_path_factory):
    """Private copy of the balanced run directory, safe to resume into."""
    src, _ = balanced_run
    dst = tmp_path_factory.mktemp("balanced_copy") / "run"
    shutil.copytree(src, dst)
    return dst


@pytest.fixture
def run_copy(balanced_run, tmp_path):
    """Per-test copy of the balanced run directory."""
    src, _ = balanced_run
    dst = tmp_path / "run"
    shutil.copytree(src, dst)
    return dst


TINY = """
target_samples = 200
pretrain_steps = 0
pretrain_samples = 200
steps = 5
batch_size = 16
eval_samples = 200
eval_every = 0
reg_probe_samples = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
