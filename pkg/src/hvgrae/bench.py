"""Experiment harness: synthetic dynamic SBM, anomaly injection, AUC and the protocol runner."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .graph import DynNetwork, Snapshot, half_up, identity_attributes, split_train_test

__all__ = [
    "CapacityError",
    "SynthSpec",
    "InjectionSpec",
    "LabeledSnapshot",
    "generate_synthetic",
    "community_labels",
    "inject_anomalies",
    "injected_network",
    "auc",
    "evaluate_reports",
    "run_experiment",
    "write_results",
]

logger = logging.getLogger(__name__)


class CapacityError(ValueError):
    """The snapshot has too few free node pairs for the requested injection."""


@dataclass
class SynthSpec:
    n_nodes: int = 60
    n_timestamps: int = 30
    communities: int = 2
    intra_p: float = 0.25
    inter_p: float = 0.02
    drift_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_timestamps < 1 or self.communities < 1:
            raise ValueError("n_nodes, n_timestamps and communities must be >= 1")
        if not 0.0 <= self.inter_p < self.intra_p <= 1.0:
            raise ValueError("require 0 <= inter_p < intra_p <= 1")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise ValueError("drift_rate must be in [0, 1]")


def community_labels(spec: SynthSpec) -> np.ndarray:
    """(T, N) community membership; balanced at t=1, then per-node drift."""
    rng = np.random.default_rng([spec.seed, 0])
    labels = np.empty((spec.n_timestamps, spec.n_nodes), dtype=np.int64)
    labels[0] = np.arange(spec.n_nodes) * spec.communities // spec.n_nodes
    for t in range(1, spec.n_timestamps):
        cur = labels[t - 1].copy()
        if spec.communities > 1:
            flip = rng.random(spec.n_nodes) < spec.drift_rate
            # move to a uniformly chosen different community
            shift = rng.integers(1, spec.communities, size=spec.n_nodes)
            cur[flip] = (cur[flip] + shift[flip]) % spec.communities
        labels[t] = cur
    return labels


def generate_synthetic(spec: SynthSpec) -> DynNetwork:
    """Undirected dynamic stochastic block model with identity attributes."""
    labels = community_labels(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_nodes
    iu = np.triu_indices(n, k=1)
    snapshots = []
    for t in range(spec.n_timestamps):
        same = labels[t][iu[0]] == labels[t][iu[1]]
        p = np.where(same, spec.intra_p, spec.inter_p)
        hit = rng.random(len(p)) < p
        a = np.zeros((n, n))
        a[iu[0][hit], iu[1][hit]] = 1.0
        a = a + a.T
        snapshots.append(Snapshot(t + 1, a, identity_attributes(n)))
    return DynNetwork(tuple(snapshots), node_count=n, attr_dim=n, directed=False, attributed=False,
                      meta={"communities": labels})


@dataclass
class InjectionSpec:
    ratio: float
    seed: int = 0
    target_snapshots: Sequence[int] | None = None

    def __post_init__(self):
        if not 0.0 < self.ratio < 0.5:
            raise ValueError(f"injection ratio must be in (0, 0.5), got {self.ratio}")


@dataclass
class LabeledSnapshot:
    snapshot: Snapshot
    labels: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def injected(self) -> list[tuple[int, int]]:
        return sorted(e for e, lab in self.labels.items() if lab == 1)


def _inject_one(snap: Snapshot, ratio: float, directed: bool, rng: np.random.Generator) -> LabeledSnapshot:
    a = snap.adjacency
    edges = snap.edges(directed)
    count = max(1, half_up(ratio * len(edges))) if len(edges) else 0
    n = snap.n_nodes
    if directed:
        cand_i, cand_j = np.nonzero((a == 0) & ~np.eye(n, dtype=bool))
    else:
        iu = np.triu_indices(n, k=1)
        free = a[iu] == 0
        cand_i, cand_j = iu[0][free], iu[1][free]
    if count > len(cand_i):
        raise CapacityError(f"snapshot {snap.t}: {count} injections requested but only {len(cand_i)} free pairs")
    pick = rng.choice(len(cand_i), size=count, replace=False)
    new = a.copy()
    new[cand_i[pick], cand_j[pick]] = 1.0
    if not directed:
        new[cand_j[pick], cand_i[pick]] = 1.0
    labels = {(int(i), int(j)): 0 for i, j in edges}
    labels.update({(int(cand_i[k]), int(cand_j[k])): 1 for k in pick})
    return LabeledSnapshot(replace(snap, adjacency=new), labels)


def inject_anomalies(net: DynNetwork, spec: InjectionSpec) -> list[LabeledSnapshot]:
    """Add uniformly sampled non-edges to the target snapshots, labeled as injected."""
    targets = range(len(net)) if spec.target_snapshots is None else list(spec.target_snapshots)
    rng = np.random.default_rng(spec.seed)
    out = []
    for pos in targets:
        if not 0 <= pos < len(net):
            raise IndexError(f"target snapshot position {pos} outside network of length {len(net)}")
        out.append(_inject_one(net[pos], spec.ratio, net.directed, rng))
    return out


def injected_network(net: DynNetwork, labeled: Iterable[LabeledSnapshot]) -> DynNetwork:
    by_t = {ls.snapshot.t: ls.snapshot for ls in labeled}
    return replace(net, snapshots=tuple(by_t.get(s.t, s) for s in net))


def auc(scores: Sequence[tuple[float, int]]) -> float:
    """Mann-Whitney AUC with ties counted half; higher score = more anomalous."""
    arr = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
    s, y = arr[:, 0], arr[:, 1].astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined without both normal and anomalous examples")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_reports(reports, labeled: Sequence[LabeledSnapshot]) -> list[tuple[float, int]]:
    """Pair each scored edge (-log y) with its injection label."""
    by_t = {ls.snapshot.t: ls.labels for ls in labeled}
    pairs = []
    for rep in reports:
        labels = by_t.get(rep.t)
        if labels is None:
            continue
        for (i, j), lp in zip(rep.edges, rep.edge_logp):
            pairs.append((-float(lp), labels[(int(i), int(j))]))
    return pairs


def run_experiment(
    dataset: DynNetwork,
    model_config,
    train_config,
    ratios: Sequence[float] = (0.01, 0.05, 0.10),
    seeds: Sequence[int] = (0, 1, 2),
    score_samples: int | None = None,
    logs: list | None = None,
) -> list[dict]:
    """Train on the head of the stream, inject into the last ``test_len`` snapshots, report AUC.

    One model is trained per seed and shared across injection ratios. Returns
    one row per (ratio, seed) followed by one mean row per ratio. Pass a
    list as ``logs`` to collect the (seed, TrainLog) of every run.
    """
    from .detection import score_stream
    from .training import train

    test_len = train_config.test_len
    rows = []
    for seed in seeds:
        tc = replace(train_config, seed=seed)
        mc = replace(model_config, seed=seed)
        train_net, test_net = split_train_test(dataset, test_len, tc.train_edge_ratio, seed)
        model, log = train(mc, tc, train_net)
        if logs is not None:
            logs.append((seed, log))
        history = replace(dataset, snapshots=dataset.snapshots[: len(dataset) - test_len])
        _, warm_state = score_stream(model, history, n_samples=score_samples, seed=seed)
        for ratio in ratios:
            labeled = inject_anomalies(test_net, InjectionSpec(ratio, seed=seed))
            reports, _ = score_stream(model, injected_network(test_net, labeled), state=warm_state, seed=seed)
            value = auc(evaluate_reports(reports, labeled))
            logger.info("seed %d ratio %.2f auc %.4f", seed, ratio, value)
            rows.append({"ratio": ratio, "seed": seed, "auc": value, "final_elbo": log.rows[-1]["elbo"]})
    for ratio in ratios:
        vals = [r["auc"] for r in rows if r["ratio"] == ratio and r["seed"] != "mean"]
        rows.append({"ratio": ratio, "seed": "mean", "auc": float(np.mean(vals)), "final_elbo": ""})
    return rows


def write_results(rows: list[dict], csv_path: str | None = None, json_path: str | None = None) -> None:
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2)
