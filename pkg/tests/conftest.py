import numpy as np
import pytest

from driftscape.potential import GaussianComponent, MixturePotential, ModelParams


def random_theta(rng, k=None, gamma=None) -> ModelParams:
    k = k or int(rng.integers(1, 4))
    comps = []
    for _ in range(k):
        A = rng.normal(size=(2, 2))
        C = A @ A.T + rng.uniform(0.05, 1.0) * np.eye(2)
        comps.append(GaussianComponent(rng.uniform(0.1, 1.0), rng.uniform(-3, 3, 2), C))
    g = gamma if gamma is not None else float(rng.uniform(0.3, 2.0))
    return ModelParams(MixturePotential(comps), g)


class ConstPhi:
    """Girsanov stub with phi identically ``c`` (and H, m as given)."""

    def __init__(self, c, rate=None, m=0.0):
        self.c = float(c)
        self.rate = float(rate if rate is not None else max(c, 1e-300))
        self.m = float(m)

    def phi(self, y):
        return np.full(len(np.asarray(y).reshape(-1, 2)), self.c)

    def h(self, y):
        return np.zeros(len(np.asarray(y).reshape(-1, 2)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
