import numpy as np
import pytest

from onetrans.features import SynthConfig, generate_synthetic
from onetrans.model import build_model, tiny_config
from onetrans.numerics import precision


def small_synth(**kw):
    base = dict(n_users=20, n_items=200, n_categories=10, n_requests=30, candidates_per_request=4)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def requests():
    return list(generate_synthetic(small_synth(), seed=3))


@pytest.fixture
def model64():
    with precision(np.float64):
        yield build_model(tiny_config(), seed=1, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -------------------------------------------------------
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
