import numpy as np
import pytest

from splitvae.data import make_clean_pairs, make_noisy_samples, split_dataset
from splitvae.vse import VseConfig


@pytest.fixture(scope="session")
def tiny_split():
    """Ten noisy 32x32 dots-vs-curves samples split 8/1/1."""
    pairs = make_clean_pairs("dots", "curves", 10, 32, seed=0, density1=0.1, density2=0.1)
    samples, _ = make_noisy_samples(pairs, 1.0, 1000, seed=1)
    return split_dataset(samples, seed=0)


@pytest.fixture
def tiny_config():
    return VseConfig(levels=2, latent_channels=2, base_filters=4, patch=16, likelihood_head="gaussian")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion and return the verdict."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def _report(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
