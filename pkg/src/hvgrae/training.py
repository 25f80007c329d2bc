"""Offline training: maximize the mean per-timestep ELBO over the training stream."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .graph import DynNetwork, check_network
from .model import HVGRAE, ModelConfig, SnapshotTensors

__all__ = ["NumericalError", "TrainConfig", "TrainLog", "train", "training_scores", "model_config_for"]

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss or gradients became NaN/Inf."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    weight_decay: float = 1e-5
    dropout: float = 0.2
    mc_samples: int = 1
    grad_clip: float | None = 5.0
    bptt_window: int | None = 4
    kl_anneal_start: int = 20
    kl_anneal_epochs: int = 40
    seed: int = 0
    test_len: int = 10
    train_edge_ratio: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 1 or self.mc_samples < 1:
            raise ValueError("epochs and mc_samples must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")
        if self.bptt_window is not None and self.bptt_window < 1:
            raise ValueError("bptt_window must be >= 1 or None")
        if self.kl_anneal_start < 0 or self.kl_anneal_epochs < 0:
            raise ValueError("kl_anneal_start and kl_anneal_epochs must be non-negative")
        if not 0.0 < self.train_edge_ratio <= 1.0:
            raise ValueError("train_edge_ratio must be in (0, 1]")

    def kl_weight(self, epoch: int) -> float:
        """KL multiplier for 1-based ``epoch``: 0 until the anneal start, then a linear ramp to 1."""
        done = epoch - 1 - self.kl_anneal_start
        if done < 0:
            return 0.0
        if self.kl_anneal_epochs == 0:
            return 1.0
        return min(1.0, done / self.kl_anneal_epochs)


@dataclass
class TrainLog:
    n_scales: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["epoch", "elbo", "recon_a", "recon_x"] + [f"kl_{i + 1}" for i in range(self.n_scales)] + ["seconds"]

    @property
    def elbo(self) -> np.ndarray:
        return np.array([r["elbo"] for r in self.rows])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            writer.writerows(self.rows)


def model_config_for(net: DynNetwork, model_config: ModelConfig, train_config: TrainConfig | None = None) -> ModelConfig:
    """Fill the data-dependent fields of ``model_config`` from ``net``."""
    updates = dict(attr_dim=net.attr_dim, directed=net.directed, attributed=net.attributed)
    if train_config is not None:
        updates.update(dropout=train_config.dropout, mc_train=train_config.mc_samples)
    return replace(model_config, **updates)


def train(model_config: ModelConfig, train_config: TrainConfig, train_net: DynNetwork) -> tuple[HVGRAE, TrainLog]:
    """Fit a fresh model on ``train_net``.

    Each epoch walks the stream once, taking one optimizer step per
    ``bptt_window`` snapshots (the whole sequence when None). The logged ELBO
    is always the unweighted bound, whatever the current KL weight.
    """
    check_network(train_net)
    cfg = model_config_for(train_net, model_config, train_config)
    model = HVGRAE(cfg)
    model.init_edge_bias(float(np.mean([s.adjacency.mean() for s in train_net])))
    snaps = [SnapshotTensors.from_snapshot(s) for s in train_net]
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.learning_rate, weight_decay=train_config.weight_decay)
    gen = torch.Generator().manual_seed(train_config.seed)
    log = TrainLog(cfg.scales)

    window = train_config.bptt_window or len(snaps)
    model.train()
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        state = model.initial_state(train_net.node_count, train_config.mc_samples)
        beta = train_config.kl_weight(epoch)
        results = []
        for lo in range(0, len(snaps), window):
            chunk, state = model.run(snaps[lo : lo + window], state=state, training=True, generator=gen)
            objective = torch.stack([r.recon_a + r.recon_x - beta * r.kl.sum() for r in chunk]).mean()
            if not torch.isfinite(objective):
                bad = next(r.t for r in chunk if not torch.isfinite(r.elbo))
                raise NumericalError(f"non-finite ELBO at epoch {epoch}, snapshot t={bad}")
            opt.zero_grad()
            (-objective).backward()
            if train_config.grad_clip is not None:
                norm = torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
                if not math.isfinite(norm):
                    raise NumericalError(f"non-finite gradient norm at epoch {epoch}, snapshot t={chunk[-1].t}")
            opt.step()
            state = state.detached()
            results.extend(chunk)

        kl = torch.stack([r.kl for r in results]).mean(0)
        row = {
            "epoch": epoch,
            "elbo": torch.stack([r.elbo for r in results]).mean().item(),
            "recon_a": torch.stack([r.recon_a for r in results]).mean().item(),
            "recon_x": torch.stack([r.recon_x for r in results]).mean().item(),
        }
        row.update({f"kl_{i + 1}": kl[i].item() for i in range(cfg.scales)})
        row["seconds"] = time.perf_counter() - start
        log.rows.append(row)
        logger.debug("epoch %d elbo %.4f", epoch, row["elbo"])

    model.eval()
    return model, log


def training_scores(model: HVGRAE, train_net: DynNetwork, n_samples: int | None = None, seed: int = 0):
    """Replay the training stream through the frozen model.

    Returns (edge log-probabilities over every existing edge, node attribute
    log-likelihoods or None for unattributed data).
    """
    from .detection import score_stream

    reports, _ = score_stream(model, train_net, n_samples=n_samples, seed=seed)
    edge_scores = np.concatenate([r.edge_logp for r in reports]) if reports else np.empty(0)
    if not model.config.attributed:
        return edge_scores, None
    return edge_scores, np.concatenate([r.node_logp for r in reports])
