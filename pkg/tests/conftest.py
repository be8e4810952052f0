import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loop_mlp(x, layers):
    """Scalar-loop MLP oracle: ``layers`` is a list of (W, b) numpy pairs with GELU between them."""
    import math

    h = [float(v) for v in x]
    for n, (w, b) in enumerate(layers):
        if n:
            h = [0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in h]
        h = [sum(w[o][i] * h[i] for i in range(len(h))) + b[o] for o in range(len(b))]
    return h


def mlp_layers(mlp):
    return [(m.weight.detach().double().numpy().tolist(), m.bias.detach().double().numpy().tolist())
            for m in mlp.net if isinstance(m, torch.nn.Linear)]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
