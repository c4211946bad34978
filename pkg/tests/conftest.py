import time
from types import SimpleNamespace

import numpy as np
import pytest

from aulacaps import data as D
from aulacaps import model as M
from aulacaps import train as T

# Synthetic overfit protocol shared by the acceptance suite and the slow tests.
OVERFIT_SEED = 7
OVERFIT_SIZE = 32

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(ACCEPTANCE_LINES[n])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """6 subjects x 120 frames, 3 AUs, 3 folds, decaying lr schedule (trained once)."""
    out = tmp_path_factory.mktemp("overfit")
    ds = D.synth_generate(subjects=6, frames_per_subject=120, seed=OVERFIT_SEED, size=OVERFIT_SIZE)
    folds = D.split_folds([v.subject_id for v in ds.sequences], 3, seed=OVERFIT_SEED)
    cfg = T.TrainConfig(seed=OVERFIT_SEED)
    t0 = time.perf_counter()
    result = T.train(ds.sequences, folds, M.desk_config(), cfg, out_dir=out)
    seconds = time.perf_counter() - t0
    return SimpleNamespace(dataset=ds, folds=folds, cfg=cfg, result=result, seconds=seconds, out=out)
