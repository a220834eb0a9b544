import numpy as np
import pytest

from memo_edge.model import MEMONetwork, ModelConfig


def make_tiny_net(seed: int = 0) -> MEMONetwork:
    """Two-level network with a randomised output head so predictions vary per pixel."""
    net = MEMONetwork(ModelConfig(channels=(8, 16), groups=4, pe_dim=8, seed=seed))
    rng = np.random.default_rng(seed + 100)
    head = net.params["decoder.head.conv.weight"]
    head.data = (rng.standard_normal(head.shape) * 0.5).astype(head.data.dtype)
    return net


@pytest.fixture
def tiny_net():
    return make_tiny_net()


@pytest.fixture
def rng():
    return np.random.default_rng(7)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def report(number: int, ok: bool, detail: str) -> None:
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
