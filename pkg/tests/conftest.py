import time

import pytest

from glclab.glc import GlcNet
from glclab.gvm import GvmNet
from glclab.harness import train_glc_checkpoint, train_gvm_checkpoint
from glclab.plant import get_profile

SEED = 42
TRACKS = ("oval", "figure_eight", "chicane")


@pytest.fixture(scope="session")
def profile_a():
    return get_profile("profile-A")


@pytest.fixture(scope="session")
def trained_gvm(profile_a):
    """Default-recipe GVM (5 epochs); ``elapsed`` holds the wall-clock training time."""
    t0 = time.perf_counter()
    net, curve = train_gvm_checkpoint(profile_a, None, epochs=5, steps=1200, seed=SEED)
    net.elapsed, net.curve = time.perf_counter() - t0, curve
    return net


@pytest.fixture(scope="session")
def glc_factory(profile_a, trained_gvm):
    """Pretrained GLC state per seed, cached; each call returns a fresh copy."""
    cache = {}

    def make(seed=SEED, epochs=3, steps=1500):
        key = (seed, epochs, steps)
        if key not in cache:
            net, curve = train_glc_checkpoint(profile_a, trained_gvm, TRACKS, None, epochs, steps, seed)
            cache[key] = (net.state_dict(), net.config, curve)
        state, config, curve = cache[key]
        net = GlcNet(profile_a, config, seed=seed)
        net.load_state_dict(state)
        net.curve = curve
        return net

    return make


@pytest.fixture()
def fresh_gvm(profile_a, trained_gvm):
    net = GvmNet(profile_a, trained_gvm.config, seed=SEED)
    net.load_state_dict(trained_gvm.state_dict())
    return net


_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
