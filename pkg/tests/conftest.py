import pytest
from hypothesis import HealthCheck, settings

from kfade.data import Dataset
from kfade.linalg import make_rng
from kfade.model import Network

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_classification(seed, n=32, d=4, classes=3):
    rng = make_rng(seed, 99)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, classes, n)
    return Dataset.classification(x, y, classes)


def random_net(seed, sizes=(4, 5, 3), nonlinearity="tanh", scale=1.0):
    net = Network.mlp(list(sizes), nonlinearity)
    return net, net.init(seed, scale)


@pytest.fixture
def small_problem():
    net, ckpt = random_net(0, (4, 6, 5, 3))
    return net, ckpt, random_classification(0, 48, 4, 3)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
