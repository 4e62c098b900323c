import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ihaudit import data as D
from ihaudit import model as M
from ihaudit import training as T


def random_spd(rng, d, low=0.5, high=5.0):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (q * rng.uniform(low, high, size=d)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_game():
    """A trained two-layer MLP on synthetic tabular data, with its member mask."""
    ds = D.synth_tabular(3, 240, 12, 3, label_noise=0.1)
    mask = D.bernoulli_split(ds, 0.5, 7)
    spec = M.ModelSpec.mlp(12, (8,), 3)
    cfg = T.SgdConfig(learning_rate=0.05, epochs=40, batch_size=16, seed=5)
    w = T.train(spec, ds, mask, cfg)
    return spec, ds, mask, cfg, w


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
