import numpy as np
import pytest

from bayespeft.lora import attach_lora
from bayespeft.model import Network, NetworkSpec, attach_head, classifier_spec


def small_net(dims=(5, 6, 4, 3), seed=0, activation="tanh"):
    return Network.init(NetworkSpec("classifier", tuple(dims), activation), seed)


def adapted_net(dims=(5, 6, 4, 3), rank=2, gamma=2.0, seed=0, activation="tanh", perturb=True):
    """Small net with adapters on every layer and non-zero B factors."""
    net = small_net(dims, seed, activation)
    rng = np.random.default_rng(seed + 100)
    for i, lay in enumerate(net.layers):
        attach_lora(lay, rank, gamma, seed=seed * 10 + i)
        if perturb:
            lay.adapter.A = rng.normal(size=lay.adapter.A.shape)
            lay.adapter.B = rng.normal(scale=0.5, size=lay.adapter.B.shape)
    return net


def batch(n=7, d=5, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.integers(classes, size=n)


@pytest.fixture
def clusters_net():
    net = Network.init(classifier_spec(), 0)
    attach_head(net, "taskB", 4, seed=1)
    return net


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, ok, detail):
    key = str(criterion)
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[key] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
