import numpy as np
import pytest
import torch

from hvgrae.graph import DynNetwork, Snapshot, identity_attributes

torch.set_num_threads(1)


def random_network(n=5, T=4, d=2, seed=0, p=0.4, directed=False, attributed=True, t0=1):
    rng = np.random.default_rng(seed)
    snaps = []
    for k in range(T):
        a = (rng.random((n, n)) < p).astype(float)
        np.fill_diagonal(a, 0)
        if not directed:
            a = np.triu(a, 1)
            a = a + a.T
        x = rng.normal(size=(n, d)) if attributed else identity_attributes(n)
        snaps.append(Snapshot(t0 + k, a, x))
    return DynNetwork(tuple(snaps), node_count=n, attr_dim=d if attributed else n, directed=directed,
                      attributed=attributed)


@pytest.fixture
def small_net():
    return random_network()


def tiny_config(**kw):
    from hvgrae.model import ModelConfig

    base = dict(scales=2, latent_dim=3, content_dim=4, gcn_dim=4, drnn_hidden=4, head_dim=3, flow_layers=1,
                dropout=0.0, attr_dim=2, attributed=True, directed=False, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def fixed_noise(config, T, n, n_samples=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [[torch.randn((n_samples, n, config.latent_dim), generator=g, dtype=torch.float64)
             for _ in range(config.scales)] for _ in range(T)]


def run_fixed(model, snaps, noises, state=None):
    """Forward a sequence with explicit noise; returns (results, state)."""
    from hvgrae.model import commit_state

    if state is None:
        state = model.initial_state(snaps[0].adjacency.shape[0], noises[0][0].shape[0])
    results = []
    for snap, noise in zip(snaps, noises):
        res = model.forward_step(state, snap, noise=noise)
        state = commit_state(state, res)
        results.append(res)
    return results, state


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
