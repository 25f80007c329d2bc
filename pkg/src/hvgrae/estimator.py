"""scikit-learn style wrapper around training, thresholding and streaming detection."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
import torch
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.exceptions import NotFittedError

from .detection import Thresholds, detect, score_snapshot
from .graph import DynNetwork, Snapshot, identity_attributes, subsample_edges
from .model import ModelConfig, SnapshotTensors, commit_state
from .training import TrainConfig, train, training_scores

__all__ = ["HVGRAEDetector", "check_dynamic_input"]


def check_dynamic_input(X, attributes=None, directed: bool | None = None, t0: int = 1) -> DynNetwork:
    """Coerce ``X`` to a validated DynNetwork.

    ``X`` is either a DynNetwork or a (T, N, N) stack of 0/1 adjacency
    matrices; ``attributes`` is then an optional (T, N, D) array. Without
    attributes nodes get one-hot identity features.
    """
    if isinstance(X, DynNetwork):
        if attributes is not None:
            raise ValueError("attributes must be None when X is already a DynNetwork")
        return X
    adj = np.asarray(X, dtype=np.float64)
    if adj.ndim != 3 or adj.shape[1] != adj.shape[2] or adj.shape[0] == 0:
        raise ValueError(f"X must have shape (T, N, N) with T >= 1, got {adj.shape}")
    T, n = adj.shape[:2]
    if directed is None:
        directed = not np.array_equal(adj, adj.transpose(0, 2, 1))
    if attributes is None:
        attrs = [identity_attributes(n)] * T
        attributed, d = False, n
    else:
        attrs = np.asarray(attributes, dtype=np.float64)
        if attrs.ndim != 3 or attrs.shape[:2] != (T, n):
            raise ValueError(f"attributes must have shape ({T}, {n}, D), got {attrs.shape}")
        attributed, d = True, attrs.shape[2]
    snaps = tuple(Snapshot(t0 + k, adj[k], attrs[k]) for k in range(T))
    return DynNetwork(snaps, node_count=n, attr_dim=d, directed=directed, attributed=attributed)


class HVGRAEDetector(OutlierMixin, BaseEstimator):
    """Unsupervised edge anomaly detector for a stream of graph snapshots.

    ``fit`` trains on a clean history and fits the extreme-value thresholds.
    The scoring methods continue the stream from the end of that history, so
    consecutive calls must pass consecutive snapshots.
    """

    def __init__(self, scales=2, latent_dim=16, flow_layers=2, info_sharing=True, mc_score=8,
                 learning_rate=0.01, epochs=100, weight_decay=1e-5, dropout=0.2, mc_samples=1,
                 bptt_window=4, kl_anneal_start=20, kl_anneal_epochs=40, train_edge_ratio=0.5,
                 risk_q=1e-3, initial_quantile=0.02, random_state=0):
        self.scales = scales
        self.latent_dim = latent_dim
        self.flow_layers = flow_layers
        self.info_sharing = info_sharing
        self.mc_score = mc_score
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.mc_samples = mc_samples
        self.bptt_window = bptt_window
        self.kl_anneal_start = kl_anneal_start
        self.kl_anneal_epochs = kl_anneal_epochs
        self.train_edge_ratio = train_edge_ratio
        self.risk_q = risk_q
        self.initial_quantile = initial_quantile
        self.random_state = random_state

    def _configs(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        params = self.get_params()
        mc = ModelConfig(**{f.name: params[f.name] for f in fields(ModelConfig) if f.name in params}, seed=seed)
        tc = TrainConfig(**{f.name: params[f.name] for f in fields(TrainConfig) if f.name in params},
                         seed=seed)
        return mc, tc

    def fit(self, X, y=None, attributes=None):
        net = check_dynamic_input(X, attributes)
        mc, tc = self._configs()
        train_net = subsample_edges(net, tc.train_edge_ratio, tc.seed)
        self.model_, self.log_ = train(mc, tc, train_net)
        edge_scores, node_scores = training_scores(self.model_, train_net, seed=tc.seed)
        self.thresholds_ = Thresholds.fit(edge_scores, node_scores, self.risk_q, self.initial_quantile)
        self.offset_ = -self.thresholds_.alpha_A
        self.directed_ = net.directed
        self.n_nodes_ = net.node_count
        self._generator = torch.Generator().manual_seed(tc.seed)
        # warm the recurrent state on the full, unsubsampled history
        self.state_ = self.model_.initial_state(net.node_count, self.mc_score)
        for snap in net:
            _, self.state_ = score_snapshot(self.model_, self.state_, snap, self._generator)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("HVGRAEDetector is not fitted yet; call fit first")

    def _stream(self, X, attributes):
        self._check_fitted()
        net = check_dynamic_input(X, attributes, directed=self.directed_, t0=self.state_.t + 1)
        if net.node_count != self.n_nodes_:
            raise ValueError(f"X has {net.node_count} nodes, the detector was fitted on {self.n_nodes_}")
        reports = []
        for snap in net:
            report, self.state_ = score_snapshot(self.model_, self.state_, snap, self._generator)
            reports.append(report)
        return reports

    def _edge_matrix(self, reports, values):
        out = np.full((len(reports), self.n_nodes_, self.n_nodes_), np.nan)
        for k, (rep, vals) in enumerate(zip(reports, values)):
            i, j = rep.edges[:, 0], rep.edges[:, 1]
            out[k, i, j] = vals
            if not self.directed_:
                out[k, j, i] = vals
        return out

    def score_samples(self, X, attributes=None):
        """(T, N, N) edge log-probabilities; NaN where there is no edge. Advances the stream."""
        reports = self._stream(X, attributes)
        return self._edge_matrix(reports, [r.edge_logp for r in reports])

    def decision_function(self, X, attributes=None):
        """Shifted scores: negative for edges below the fitted threshold. Advances the stream."""
        return self.score_samples(X, attributes) - self.thresholds_.alpha_A

    def predict(self, X, attributes=None):
        """(T, N, N) with -1 for anomalous edges, 1 for normal edges and 0 for non-edges."""
        scores = self.decision_function(X, attributes)
        return np.where(np.isnan(scores), 0, np.where(scores < 0, -1, 1)).astype(np.int64)

    def verdicts(self, X, attributes=None):
        """One DetectionVerdict per snapshot. Advances the stream."""
        return [detect(r, self.thresholds_) for r in self._stream(X, attributes)]

    def transform(self, X, attributes=None):
        """(T, N, scales * latent_dim) posterior means per snapshot. Advances the stream."""
        self._check_fitted()
        net = check_dynamic_input(X, attributes, directed=self.directed_, t0=self.state_.t + 1)
        out = []
        with torch.no_grad():
            for snap in net:
                res = self.model_.forward_step(self.state_, SnapshotTensors.from_snapshot(snap),
                                               generator=self._generator)
                out.append(torch.cat([m.mu.mean(0) for m in res.merged], -1).numpy())
                self.state_ = commit_state(self.state_, res)
        return np.stack(out)
