import numpy as np
import pytest

from fedgt.graph import Graph, make_nonoverlapping, generate_regime_sbm
from fedgt.runtime import RunConfig


def triangle():
    return Graph(np.zeros((3, 1)), np.array([0, 1, 0]), np.array([[0, 1], [1, 2], [0, 2]]), 2)


def path_graph(n, num_classes=2, p=2, seed=0):
    rng = np.random.default_rng(seed)
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return Graph(rng.standard_normal((n, p)), rng.integers(0, num_classes, n), edges, num_classes)


def erdos_renyi(n, p, seed=0, connected=True):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    if connected:
        # add a spanning path so no node is isolated
        edges = np.concatenate([edges, np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)])
    return Graph(rng.standard_normal((n, 3)), rng.integers(0, 2, n), edges, 2)


@pytest.fixture
def tiny_federation():
    """Two-region synthetic graph split by region; small enough for fast runs."""
    g, region, _ = generate_regime_sbm(num_regions=2, num_classes=3, nodes_per_class=12,
                                       feature_dim=6, seed=3)
    return g, make_nonoverlapping(g, region)


@pytest.fixture
def tiny_cfg():
    return RunConfig(rounds=2, hidden=8, heads=2, layers=1, pe_dim=2, n_s=3, n_g=2,
                     batch_size=8, seed=1)


def random_batch(cfg, b, seed=0, labels=True, pad_first=True):
    from fedgt.model import Batch
    rng = np.random.default_rng(seed)
    mask = np.ones((b, 1 + cfg.n_s), dtype=bool)
    if pad_first and cfg.n_s > 1:
        mask[0, 2:] = False
    tokens = rng.standard_normal((b, 1 + cfg.n_s, cfg.input_dim)) * mask[..., None]
    gn = rng.standard_normal((cfg.n_g, cfg.hidden))
    y = rng.integers(0, cfg.num_classes, b) if labels else None
    return Batch(tokens, mask, gn, y)


def max_fd_error(params, cfg, batch, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients."""
    from fedgt.model import cross_entropy, forward, loss_and_grad

    def loss(p):
        return cross_entropy(forward(p, cfg, batch)[0], batch.labels)

    _, grads = loss_and_grad(params, cfg, batch)
    worst = 0.0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            fd = (loss(plus) - loss(minus)) / (2 * eps)
            g = grads[name][idx]
            # absolute floor keeps rounding noise on near-zero entries out of the ratio
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-6))
    return worst


ACCEPTANCE_LINES = []


def record_criterion(label, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
