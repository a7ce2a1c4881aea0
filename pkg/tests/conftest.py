import numpy as np
import pytest
import torch
from hypothesis import settings

from amd_motion.corpus import generate_corpus

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(24, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_clip(rng, f=40):
    """Random but valid clip: contacts in [0, 1], other channels small."""
    x = rng.normal(0, 0.05, size=(f, 263)).astype(np.float32)
    x[:, 259:263] = rng.random((f, 4))
    return x


ACCEPTANCE_LINES: dict = {}


def pytest_runtest_makereport(item, call):
    crit = item.get_closest_marker("criterion")
    if crit is None or call.when != "call":
        return
    n, title = crit.args
    status = "PASS" if call.excinfo is None else "FAIL"
    detail = item.user_properties and dict(item.user_properties).get("detail", "")
    ACCEPTANCE_LINES[n] = f"criterion {n:>2} {status}  {title}  ({call.duration:.1f}s){'  ' + detail if detail else ''}"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
