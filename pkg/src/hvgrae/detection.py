"""Automatic thresholding, online scoring and anomaly interpretation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize

from .graph import DynNetwork, Snapshot
from .model import HVGRAE, PROB_CLAMP, EncoderState, SnapshotTensors, attribute_log_likelihood, commit_state

__all__ = [
    "MIN_SCORES",
    "ReconReport",
    "Thresholds",
    "DetectionVerdict",
    "fit_gpd",
    "fit_threshold",
    "score_snapshot",
    "score_stream",
    "detect",
    "bernoulli_kl",
]

MIN_SCORES = 50
MIN_PEAKS = 10


@dataclass
class ReconReport:
    t: int
    edges: np.ndarray
    edge_logp: np.ndarray
    node_logp: np.ndarray | None = None
    node_logp_dims: np.ndarray | None = None
    attr_sigma_sq: np.ndarray | None = None
    n_nodes: int = 0


@dataclass
class Thresholds:
    alpha_A: float
    alpha_X: float | None = None
    evt_params: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, edge_scores, node_scores=None, risk_q: float = 1e-3, initial_quantile: float = 0.02):
        edge_fit = _pot(np.asarray(edge_scores, dtype=np.float64), risk_q, initial_quantile)
        params = {"initial_quantile": initial_quantile, "risk_q": risk_q, "edges": edge_fit}
        alpha_x = None
        if node_scores is not None:
            node_fit = _pot(np.asarray(node_scores, dtype=np.float64), risk_q, initial_quantile)
            params["nodes"] = node_fit
            alpha_x = node_fit["threshold"]
        return cls(edge_fit["threshold"], alpha_x, params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "Thresholds":
        return cls(**raw)


@dataclass
class DetectionVerdict:
    t: int
    alpha_A: float
    flagged_edges: list[tuple[int, int, float]]
    flagged_nodes: list[tuple[int, float, list[float]]]
    gamma_e: float
    gamma_n: float
    eta_e: float
    eta_n: float

    def to_json_dict(self) -> dict:
        return {
            "t": int(self.t),
            "alpha_A": float(self.alpha_A),
            "flagged_edges": [[int(i), int(j), float(lp)] for i, j, lp in self.flagged_edges],
            "flagged_nodes": [[int(k), float(lp)] for k, lp, _ in self.flagged_nodes],
            "gamma_e": float(self.gamma_e),
            "gamma_n": float(self.gamma_n),
            "eta_e": float(self.eta_e),
            "eta_n": float(self.eta_n),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


# -- extreme value thresholding ------------------------------------------


def _gpd_nll(params, peaks):
    gamma, log_sigma = params
    sigma = math.exp(log_sigma)
    if abs(gamma) < 1e-10:
        return len(peaks) * log_sigma + peaks.sum() / sigma
    arg = 1.0 + gamma * peaks / sigma
    if np.any(arg <= 0):
        return np.inf
    return len(peaks) * log_sigma + (1.0 + 1.0 / gamma) * np.log(arg).sum()


def fit_gpd(peaks: np.ndarray) -> tuple[float, float, bool]:
    """Maximum-likelihood GPD (shape, scale) with method-of-moments start."""
    peaks = np.asarray(peaks, dtype=np.float64)
    mean, var = peaks.mean(), peaks.var()
    if var > 0:
        gamma0 = 0.5 * (1.0 - mean**2 / var)
        sigma0 = 0.5 * mean * (mean**2 / var + 1.0)
    else:
        gamma0, sigma0 = 0.0, mean
    res = minimize(_gpd_nll, x0=[gamma0, math.log(max(sigma0, 1e-12))], args=(peaks,), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 5000})
    gamma, log_sigma = res.x
    ok = bool(res.success) and np.isfinite(res.fun)
    return float(gamma), float(math.exp(log_sigma)), ok


def _pot(scores: np.ndarray, risk_q: float, initial_quantile: float) -> dict:
    """Peaks-over-threshold on the lower tail of log-probability scores."""
    if scores.ndim != 1 or len(scores) < MIN_SCORES:
        raise ValueError(f"need at least {MIN_SCORES} scores to fit a threshold, got {scores.size}")
    if not 0.0 < risk_q < initial_quantile < 1.0:
        raise ValueError("require 0 < risk_q < initial_quantile < 1")
    lo, hi = float(scores.min()), float(scores.max())
    fallback = float(np.quantile(scores, risk_q, method="inverted_cdf"))
    result = {"threshold": fallback, "method": "empirical", "gpd_shape": None, "gpd_scale": None}

    # work on the upper tail of the negated scores
    x = -scores
    init = float(np.quantile(x, 1.0 - initial_quantile, method="inverted_cdf"))
    peaks = x[x > init] - init
    result["initial_threshold"] = -init
    result["n_peaks"] = int(len(peaks))
    if len(peaks) < MIN_PEAKS:
        return result
    gamma, sigma, ok = fit_gpd(peaks)
    if not ok:
        return result
    r = risk_q * len(x) / len(peaks)
    if abs(gamma) < 1e-10:
        z_q = init - sigma * math.log(r)
    else:
        z_q = init + sigma / gamma * (r ** (-gamma) - 1.0)
    if not math.isfinite(z_q):
        return result
    result.update(threshold=float(np.clip(-z_q, lo, hi)), method="gpd", gpd_shape=gamma, gpd_scale=sigma)
    return result


def fit_threshold(scores, risk_q: float = 1e-3, initial_quantile: float = 0.02) -> float:
    """Log-probability level below which a score is anomalous.

    Falls back to the empirical ``risk_q`` quantile when the GPD tail fit is
    not usable. The result always lies within [min(scores), max(scores)].
    """
    return _pot(np.asarray(scores, dtype=np.float64), risk_q, initial_quantile)["threshold"]


# -- scoring -------------------------------------------------------------


def score_snapshot(
    model: HVGRAE, state: EncoderState, snapshot: Snapshot, generator: torch.Generator | None = None
) -> tuple[ReconReport, EncoderState]:
    """Score every existing edge (and node attributes) of ``snapshot``, then advance ``state``."""
    if state.t is not None and snapshot.t <= state.t:
        raise ValueError(f"snapshot t={snapshot.t} arrives after t={state.t}; snapshots must be in order")
    cfg = model.config
    snap = SnapshotTensors.from_snapshot(snapshot)
    with torch.no_grad():
        res = model.forward_step(state, snap, training=False, generator=generator)
        log_y = torch.log(res.decoded.edge_probs).mean(0).numpy()
        edges = snapshot.edges(cfg.directed)
        report = ReconReport(
            t=snapshot.t, edges=edges, edge_logp=log_y[edges[:, 0], edges[:, 1]], n_nodes=snapshot.n_nodes
        )
        if cfg.attributed:
            dims = attribute_log_likelihood(snap.attributes, res.decoded.attr_mu, res.decoded.attr_sigma_sq)
            report.node_logp_dims = dims.mean(0).numpy()
            report.node_logp = report.node_logp_dims.sum(-1)
            report.attr_sigma_sq = res.decoded.attr_sigma_sq.mean(0).numpy()
    return report, commit_state(state, res)


def score_stream(
    model: HVGRAE,
    net: DynNetwork,
    state: EncoderState | None = None,
    n_samples: int | None = None,
    seed: int = 0,
    generator: torch.Generator | None = None,
) -> tuple[list[ReconReport], EncoderState]:
    model.eval()
    if state is None:
        state = model.initial_state(net.node_count, n_samples or model.config.mc_score)
    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    reports = []
    for snap in net:
        report, state = score_snapshot(model, state, snap, generator)
        reports.append(report)
    return reports, state


# -- verdicts ------------------------------------------------------------


def bernoulli_kl(p, q) -> np.ndarray:
    """Elementwise KL(Bernoulli(p) || Bernoulli(q)) in nats."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = np.clip(np.asarray(q, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))


def _threshold_variance(alpha_x: float, dim: int) -> float:
    # variance whose per-dimension peak log-density equals alpha_x / dim
    return max(math.exp(-2.0 * alpha_x / dim) / (2.0 * math.pi), 1e-12)


def detect(report: ReconReport, thresholds: Thresholds) -> DetectionVerdict:
    alpha_a = thresholds.alpha_A
    edge_mask = report.edge_logp < alpha_a
    flagged_edges = [
        (int(i), int(j), float(lp)) for (i, j), lp in zip(report.edges[edge_mask], report.edge_logp[edge_mask])
    ]

    # worst incident flagged-edge score per node
    node_edge_score: dict[int, float] = {}
    for i, j, lp in flagged_edges:
        for k in (i, j):
            node_edge_score[k] = min(lp, node_edge_score.get(k, math.inf))

    attributed = report.node_logp is not None and thresholds.alpha_X is not None
    flagged_nodes = []
    if attributed:
        n_total = report.n_nodes
        for k in range(report.n_nodes):
            if report.node_logp[k] < thresholds.alpha_X or k in node_edge_score:
                flagged_nodes.append((k, float(report.node_logp[k]), report.node_logp_dims[k].tolist()))
    else:
        n_total = len(np.unique(report.edges)) if len(report.edges) else 0
        flagged_nodes = [(k, lp, []) for k, lp in sorted(node_edge_score.items())]

    n_edges = len(report.edges)
    alpha_prob = min(max(math.exp(alpha_a), PROB_CLAMP), 1.0 - PROB_CLAMP)
    eta_e = float(bernoulli_kl(np.exp(report.edge_logp), alpha_prob).sum()) if n_edges else 0.0
    eta_n = 0.0
    if attributed and report.attr_sigma_sq is not None:
        var = report.attr_sigma_sq
        ratio = var / _threshold_variance(thresholds.alpha_X, var.shape[-1])
        eta_n = float(0.5 * (ratio - 1.0 - np.log(ratio)).sum())

    return DetectionVerdict(
        t=report.t,
        alpha_A=alpha_a,
        flagged_edges=flagged_edges,
        flagged_nodes=flagged_nodes,
        gamma_e=len(flagged_edges) / n_edges if n_edges else 0.0,
        gamma_n=len(flagged_nodes) / n_total if n_total else 0.0,
        eta_e=max(eta_e, 0.0),
        eta_n=max(eta_n, 0.0),
    )
