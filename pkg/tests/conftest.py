import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tmnet.model import ModelConfig
from tmnet.synth import generate_corpus

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """A network small enough to train for a few iterations inside a unit test."""
    return ModelConfig(channels=8, front_resblocks=1, recon_resblocks=1)


@pytest.fixture(scope="session")
def small_corpus():
    """16 train / 2 val / 2 test clips of the standard size."""
    return generate_corpus(seed=7, n_clips=20, n_val=2, n_test=2)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record ``(criterion, passed, detail)``; summarised after the run."""

    def record(criterion: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
