import itertools

import numpy as np
import pytest

from netbounds.network import Network, ancestral_sample, layer_evidence


def random_bipartite(rng, kind, n1, n2, scale=1.0, priors=None):
    """Complete two-layer net; sigmoid weights N(0, scale^2), noisy-OR theta ~ Exp(scale)."""
    if kind == "sigmoid":
        W = rng.normal(0.0, scale, (n1, n2))
    else:
        W = rng.exponential(scale, (n1, n2))
    if priors is None:
        priors = rng.uniform(0.1, 0.9, n2)
    return Network.bipartite(kind, W, priors)


def sampled_evidence(net, rng):
    return layer_evidence(net, ancestral_sample(net, rng)[net.layers[0]])


def all_states(n):
    return np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.int8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``(criterion, passed, detail)`` line for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, passed, detail):
        line = f"acceptance {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
