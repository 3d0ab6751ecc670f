import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape, requires_grad=True):
    from tfcorrnet.tensor import Tensor
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad, dtype=np.float64)


def randomize(module, rng, scale=0.3):
    """Give every parameter a random f64 value so no gradient path is trivially zero."""
    for _, p in module.named_parameters():
        p.data = (scale * rng.standard_normal(p.shape)).astype(np.float64)
    return module


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
