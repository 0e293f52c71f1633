import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paint_lab import kernels
from paint_lab.policy import Vocab
from paint_lab.tasks import toy_vocab

settings.register_profile("lab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture
def vocab4():
    return Vocab(("a", "b", "c", "<eos>"), "<eos>")


@pytest.fixture
def toy():
    return toy_vocab()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend, restoring the default afterwards."""
    before = kernels.get_backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(before)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
