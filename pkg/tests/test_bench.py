import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency
from sklearn.metrics import roc_auc_score

from hvgrae.bench import (
    CapacityError,
    InjectionSpec,
    SynthSpec,
    auc,
    community_labels,
    generate_synthetic,
    inject_anomalies,
    injected_network,
    run_experiment,
    write_results,
)
from hvgrae.graph import DynNetwork, Snapshot, identity_attributes
from hvgrae.model import ModelConfig
from hvgrae.training import TrainConfig

from conftest import random_network


def _net_with_edges(n, m, seed=0, directed=False):
    rng = np.random.default_rng(seed)
    a = np.zeros((n, n))
    if directed:
        cand = [(i, j) for i in range(n) for j in range(n) if i != j]
    else:
        cand = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for k in rng.choice(len(cand), m, replace=False):
        i, j = cand[k]
        a[i, j] = 1
        if not directed:
            a[j, i] = 1
    return DynNetwork((Snapshot(1, a, identity_attributes(n)),), n, n, directed=directed, attributed=False)


def test_inject_count_and_disjointness():
    net = _net_with_edges(30, 100)
    [ls] = inject_anomalies(net, InjectionSpec(0.1, seed=1))
    injected = ls.injected
    assert len(injected) == 10
    orig = {tuple(e) for e in net[0].edges(False).tolist()}
    assert not set(injected) & orig
    assert sum(1 for v in ls.labels.values() if v == 0) == 100
    a = ls.snapshot.adjacency
    assert np.array_equal(a, a.T) and np.trace(a) == 0 and a.sum() == 2 * 110


def test_inject_empty_snapshot_and_determinism():
    net = _net_with_edges(5, 0)
    [ls] = inject_anomalies(net, InjectionSpec(0.2))
    assert ls.injected == [] and np.array_equal(ls.snapshot.adjacency, net[0].adjacency)
    dense = _net_with_edges(25, 60, seed=3)
    a = inject_anomalies(dense, InjectionSpec(0.3, seed=7))
    b = inject_anomalies(dense, InjectionSpec(0.3, seed=7))
    assert a[0].injected == b[0].injected


def test_inject_capacity_and_spec_validation():
    full = _net_with_edges(4, 5)
    with pytest.raises(CapacityError):
        inject_anomalies(full, InjectionSpec(0.4))
    for bad in (0.0, 0.5, -0.1):
        with pytest.raises(ValueError):
            InjectionSpec(bad)
    with pytest.raises(IndexError):
        inject_anomalies(full, InjectionSpec(0.1, target_snapshots=[3]))


@given(st.integers(0, 10_000), st.floats(0.01, 0.45), st.booleans())
@settings(max_examples=40, deadline=None)
def test_injection_never_duplicates_or_self_loops(seed, ratio, directed):
    net = _net_with_edges(15, 30, seed=seed % 50, directed=directed)
    [ls] = inject_anomalies(net, InjectionSpec(ratio, seed=seed))
    a = ls.snapshot.adjacency
    assert set(np.unique(a)) <= {0.0, 1.0} and np.trace(a) == 0
    assert a.sum() - net[0].adjacency.sum() == (1 if directed else 2) * len(ls.injected)
    assert all(net[0].adjacency[i, j] == 0 for i, j in ls.injected)


def test_injected_network_replaces_targets_only():
    net = random_network(n=8, T=4, attributed=False, p=0.3)
    labeled = inject_anomalies(net, InjectionSpec(0.2, target_snapshots=[2, 3]))
    out = injected_network(net, labeled)
    assert out[0] is net[0] and out[1] is net[1]
    assert out[3].adjacency.sum() > net[3].adjacency.sum()


def test_synthetic_zero_drift_keeps_labels():
    labels = community_labels(SynthSpec(n_nodes=30, n_timestamps=10, communities=3, drift_rate=0.0))
    assert (labels == labels[0]).all()
    assert np.bincount(labels[0]).tolist() == [10, 10, 10]


def test_synthetic_drift_moves_some_nodes():
    labels = community_labels(SynthSpec(drift_rate=0.2, seed=1))
    assert (labels[1:] != labels[:-1]).any()
    assert labels.min() >= 0 and labels.max() <= 1


def test_equal_probabilities_independent_of_communities():
    spec = SynthSpec(n_nodes=60, n_timestamps=6, intra_p=0.1, inter_p=0.1 - 1e-12, seed=3)
    net = generate_synthetic(spec)
    labels = net.meta["communities"]
    iu = np.triu_indices(60, 1)
    table = np.zeros((2, 2))
    for t, snap in enumerate(net):
        same = labels[t][iu[0]] == labels[t][iu[1]]
        hit = snap.adjacency[iu] == 1
        for s in (0, 1):
            for h in (0, 1):
                table[s, h] += np.sum((same == s) & (hit == h))
    assert table[:, 1].sum() >= 1000
    assert chi2_contingency(table)[1] > 0.01


def test_expected_edge_count_within_binomial_bounds():
    spec = SynthSpec(seed=5)
    net = generate_synthetic(spec)
    labels = net.meta["communities"]
    iu = np.triu_indices(spec.n_nodes, 1)
    for t, snap in enumerate(net):
        same = labels[t][iu[0]] == labels[t][iu[1]]
        p = np.where(same, spec.intra_p, spec.inter_p)
        mean, sd = p.sum(), np.sqrt((p * (1 - p)).sum())
        assert abs(snap.adjacency[iu].sum() - mean) <= 3 * sd + 1e-9


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(intra_p=0.1, inter_p=0.2)
    with pytest.raises(ValueError):
        SynthSpec(drift_rate=1.5)


def test_auc_examples():
    assert auc([(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]) == 1.0
    assert auc([(0.4, 1), (0.4, 0), (0.4, 0)]) == 0.5
    assert auc([(0.9, 1), (0.8, 0), (0.3, 1), (0.1, 0)]) == 0.75
    with pytest.raises(ValueError):
        auc([(0.1, 0), (0.2, 0)])


@given(st.lists(st.tuples(st.integers(0, 5).map(float), st.integers(0, 1)), min_size=2, max_size=60))
@settings(max_examples=60, deadline=None)
def test_auc_matches_sklearn_and_is_rank_invariant(pairs):
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    scores = [s for s, _ in pairs]
    assert auc(pairs) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    warped = [(np.exp(3 * s) + s**3, y) for s, y in pairs]
    assert auc(warped) == pytest.approx(auc(pairs), abs=1e-12)


def test_run_experiment_schema_and_determinism(tmp_path):
    data = generate_synthetic(SynthSpec(n_nodes=16, n_timestamps=8, intra_p=0.4, inter_p=0.05))
    mc = ModelConfig(latent_dim=3, content_dim=6, gcn_dim=6, drnn_hidden=6, head_dim=4, flow_layers=1, mc_score=2)
    tc = TrainConfig(epochs=3, test_len=3)
    rows = run_experiment(data, mc, tc, ratios=(0.1, 0.2), seeds=(0, 1))
    assert [(r["ratio"], r["seed"]) for r in rows] == [(0.1, 0), (0.2, 0), (0.1, 1), (0.2, 1),
                                                         (0.1, "mean"), (0.2, "mean")]
    assert all(0.0 <= r["auc"] <= 1.0 for r in rows)
    again = run_experiment(data, mc, tc, ratios=(0.1, 0.2), seeds=(0, 1))
    assert [r["auc"] for r in rows] == [r["auc"] for r in again]
    write_results(rows, str(tmp_path / "r.csv"), str(tmp_path / "r.json"))
    with open(tmp_path / "r.csv") as fh:
        assert next(csv.reader(fh)) == ["ratio", "seed", "auc", "final_elbo"]
    assert len(json.loads((tmp_path / "r.json").read_text())) == 6
