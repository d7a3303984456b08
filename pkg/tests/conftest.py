import numpy as np
import pytest
from hypothesis import settings

from xenospec.synthgen import GenerationConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end test")
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion; returns a checker.

    ``check(n, ok, detail)`` stores the line for the terminal summary and then
    asserts, so a failing criterion still reports its measured values.
    """
    results = request.config.stash[_ACCEPTANCE]

    def check(number: int, ok: bool, detail: str) -> None:
        results[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_dataset():
    """Two species, three subjects each, 24x32 canvases."""
    cfg = GenerationConfig(
        seed=3,
        species=("pig", "human"),
        subjects_per_species=3,
        images_per_subject=2,
        malperfused_images_per_subject=1,
        height=24,
        width=32,
    )
    return generate_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
