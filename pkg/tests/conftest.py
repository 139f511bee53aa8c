import numpy as np
import pytest

from crcrisk import training as tr
from crcrisk.synthcohort import SynthConfig, generate_cohort
from helpers import TINY_MODEL


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SynthConfig(n_patients=24, seed=5, slide_px=(64, 64)))


@pytest.fixture(scope="session")
def tiny_setup(small_cohort):
    bank = tr.SlideBank.for_model(TINY_MODEL, small_cohort.config.patch_px, 0)
    cfg = tr.TrainConfig(pretrain_epochs=1, finetune_epochs=1, batch_size=8, max_regions_eval=4)
    return small_cohort, bank, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    ran = terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
    if not any("test_acceptance" in r.nodeid for r in ran):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(VERDICTS.get(n, f"criterion {n:>2}: NOT RUN"))
