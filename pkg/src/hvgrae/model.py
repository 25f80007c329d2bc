"""Hierarchical variational graph recurrent autoencoder.

One call to :meth:`HVGRAE.forward_step` runs a full timestep: bottom-up
GCN/DRNN feature extraction, the predictive prior, top-down inference with
precision-weighted sharing, flow sampling, decoding and the ELBO terms.
Recurrent history lives in an :class:`EncoderState` that is only advanced by
:func:`commit_state`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import Snapshot, normalize_adjacency
from .latent import (
    FlowChain,
    GaussianParams,
    LatentSample,
    gaussian_log_density,
    kl_estimate,
    positive_variance,
    precision_merge,
    reparameterize,
)
from .layers import DilatedGRUCell, GCNLayer, MLPBlock

__all__ = [
    "PROB_CLAMP",
    "CHECKPOINT_VERSION",
    "ModelConfig",
    "EncoderState",
    "DecoderOutput",
    "TimestepResult",
    "SnapshotTensors",
    "HVGRAE",
    "bernoulli_log_likelihood",
    "attribute_log_likelihood",
    "elbo_step",
    "commit_state",
    "save_checkpoint",
    "load_checkpoint",
]

PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "hvgrae-checkpoint"


@dataclass
class ModelConfig:
    scales: int = 2
    latent_dim: int = 16
    content_dim: int = 64
    gcn_dim: int = 64
    drnn_hidden: int = 64
    head_dim: int = 32
    flow_layers: int = 2
    mc_train: int = 1
    mc_score: int = 8
    dropout: float = 0.2
    info_sharing: bool = True
    seed: int = 0
    # filled from the data at fit time
    attr_dim: int = 0
    directed: bool = False
    attributed: bool = True

    def __post_init__(self):
        for name in ("scales", "latent_dim", "content_dim", "gcn_dim", "drnn_hidden", "head_dim", "mc_train", "mc_score"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.flow_layers < 0:
            raise ValueError(f"flow_layers must be >= 0, got {self.flow_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def dilation(self, scale: int) -> int:
        """Dilation of the 1-based ``scale``."""
        return 2 ** (scale - 1)


@dataclass
class SnapshotTensors:
    """Tensor views of one snapshot as consumed by the model."""

    t: int
    adjacency: torch.Tensor
    norm_adj: torch.Tensor
    attributes: torch.Tensor

    @classmethod
    def from_snapshot(cls, snap: Snapshot) -> "SnapshotTensors":
        return cls(
            t=snap.t,
            adjacency=torch.tensor(snap.adjacency, dtype=torch.float64),
            norm_adj=torch.tensor(normalize_adjacency(snap.adjacency), dtype=torch.float64),
            attributes=torch.tensor(snap.attributes, dtype=torch.float64),
        )


def _ring(depth: int, items=()) -> deque:
    return deque(items, maxlen=depth)


@dataclass
class EncoderState:
    """Dilation ring buffers per scale; tensors carry a leading sample axis where stochastic."""

    n_nodes: int
    n_samples: int
    t: int | None = None
    enc_h: list[deque] = field(default_factory=list)
    dec_h: list[deque] = field(default_factory=list)
    prior_h: list[deque] = field(default_factory=list)
    z: list[deque] = field(default_factory=list)
    z_gauss: list[deque] = field(default_factory=list)
    # normalized adjacency of the last committed snapshot; the decoder conditions on A(<t)
    prev_norm_adj: torch.Tensor | None = None

    @classmethod
    def initial(cls, config: ModelConfig, n_nodes: int, n_samples: int = 1) -> "EncoderState":
        depths = [config.dilation(i + 1) for i in range(config.scales)]
        return cls(
            n_nodes=n_nodes,
            n_samples=n_samples,
            enc_h=[_ring(d) for d in depths],
            dec_h=[_ring(d) for d in depths],
            prior_h=[_ring(d) for d in depths],
            z=[_ring(d) for d in depths],
            z_gauss=[_ring(d) for d in depths],
        )

    def lagged(self, buffers: str, scale_idx: int, zeros_shape: tuple[int, ...]) -> torch.Tensor:
        """Entry from exactly one dilation ago, or zeros when that is before the stream start."""
        buf = getattr(self, buffers)[scale_idx]
        if len(buf) == buf.maxlen:
            return buf[0]
        return torch.zeros(zeros_shape, dtype=torch.float64)

    def decoder_adjacency(self) -> torch.Tensor:
        if self.prev_norm_adj is None:
            return torch.eye(self.n_nodes, dtype=torch.float64)
        return self.prev_norm_adj

    def permuted(self, perm) -> "EncoderState":
        """Copy with node axis (second-to-last) permuted; used by equivariance checks."""
        idx = torch.as_tensor(perm)
        out = EncoderState(self.n_nodes, self.n_samples, self.t)
        for name in ("enc_h", "dec_h", "prior_h", "z", "z_gauss"):
            setattr(out, name, [_ring(b.maxlen, (x[..., idx, :] for x in b)) for b in getattr(self, name)])
        if self.prev_norm_adj is not None:
            out.prev_norm_adj = self.prev_norm_adj[idx][:, idx]
        return out

    def detached(self) -> "EncoderState":
        out = EncoderState(self.n_nodes, self.n_samples, self.t, prev_norm_adj=self.prev_norm_adj)
        for name in ("enc_h", "dec_h", "prior_h", "z", "z_gauss"):
            setattr(out, name, [_ring(b.maxlen, (x.detach() for x in b)) for b in getattr(self, name)])
        return out


@dataclass
class DecoderOutput:
    edge_probs: torch.Tensor
    attr_mu: torch.Tensor
    attr_sigma_sq: torch.Tensor
    edge_logits: torch.Tensor


@dataclass
class TimestepResult:
    t: int
    posteriors: list[GaussianParams]
    priors: list[GaussianParams]
    merged: list[GaussianParams]
    samples: list[LatentSample]
    decoded: DecoderOutput
    recon_a: torch.Tensor
    recon_x: torch.Tensor
    kl: torch.Tensor
    # per-sample terms, leading axis = Monte-Carlo sample
    recon_a_samples: torch.Tensor | None = None
    pending: dict = field(default_factory=dict, repr=False)

    @property
    def elbo(self) -> torch.Tensor:
        return self.recon_a + self.recon_x - self.kl.sum()


def bernoulli_log_likelihood(adjacency: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Sum over all (i, j) of A log y + (1 - A) log(1 - y); leading axes are kept."""
    ll = adjacency * torch.log(probs) + (1.0 - adjacency) * torch.log1p(-probs)
    return ll.sum((-2, -1))


def attribute_log_likelihood(x: torch.Tensor, mu: torch.Tensor, sigma_sq: torch.Tensor) -> torch.Tensor:
    """Per-node, per-dimension Gaussian log-likelihood."""
    return gaussian_log_density(x, GaussianParams(mu, sigma_sq))


def elbo_step(
    adjacency: torch.Tensor,
    attributes: torch.Tensor | None,
    decoded: DecoderOutput,
    merged: Sequence[GaussianParams],
    priors: Sequence[GaussianParams],
    samples: Sequence[LatentSample],
    chains: Sequence[FlowChain],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Monte-Carlo ELBO terms averaged over the leading sample axis.

    Returns (recon_a, recon_x, kl per scale, recon_a per sample). Pass
    ``attributes=None`` to drop the attribute likelihood.
    """
    recon_a_s = bernoulli_log_likelihood(adjacency, decoded.edge_probs)
    recon_a = recon_a_s.mean()
    if attributes is None:
        recon_x = recon_a.new_zeros(())
    else:
        recon_x = attribute_log_likelihood(attributes, decoded.attr_mu, decoded.attr_sigma_sq).sum((-2, -1)).mean()
    kl = torch.stack(
        [
            kl_estimate((q, chain), (p, chain), s.z_gauss).sum(-1).mean()
            for q, p, s, chain in zip(merged, priors, samples, chains)
        ]
    )
    return recon_a, recon_x, kl, recon_a_s


class _GaussianGCNHead(nn.Module):
    """GNN -> (GNN linear mean, GNN softplus variance)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.hidden = GCNLayer(in_dim, hidden, "relu")
        self.mean = GCNLayer(hidden, out_dim, "linear")
        self.var = GCNLayer(hidden, out_dim, "linear")

    def forward(self, norm_adj, g):
        h = self.hidden(norm_adj, g)
        return GaussianParams(self.mean(norm_adj, h), positive_variance(self.var(norm_adj, h)))


class _GaussianMLPHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.hidden = MLPBlock([in_dim, hidden], "relu")
        self.mean = nn.Linear(hidden, out_dim)
        self.var = nn.Linear(hidden, out_dim)
        for lin in (self.mean, self.var):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, g):
        h = self.hidden(g)
        return GaussianParams(self.mean(h), positive_variance(self.var(h)))


class HVGRAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.attr_dim < 1:
            raise ValueError("config.attr_dim must be set to the attribute dimension before building the model")
        self.config = config
        cfg = config
        M, d, H = cfg.scales, cfg.latent_dim, cfg.drnn_hidden
        gen = torch.Generator().manual_seed(cfg.seed)
        # nn.init draws from the global RNG; fork it so construction is seeded and side-effect free
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.phi_x = MLPBlock([cfg.attr_dim, cfg.content_dim], "relu", cfg.dropout)
            self.enc_gcn = nn.ModuleList(
                GCNLayer(cfg.content_dim if i == 0 else cfg.gcn_dim, cfg.gcn_dim) for i in range(M)
            )
            self.enc_rnn = nn.ModuleList(
                DilatedGRUCell(cfg.gcn_dim + (H if i else 0), H, scale=i + 1) for i in range(M)
            )
            self.post_head = nn.ModuleList(
                _GaussianGCNHead(H + d + (d if i < M - 1 else 0), cfg.head_dim, d) for i in range(M)
            )
            self.post_topdown = nn.ModuleList(nn.Linear(d, d) for _ in range(M - 1))
            self.prior_rnn = nn.ModuleList(DilatedGRUCell(d, H, scale=i + 1) for i in range(M))
            self.prior_head = nn.ModuleList(
                _GaussianMLPHead(H + (d if i < M - 1 else 0), cfg.head_dim, d) for i in range(M)
            )
            self.prior_topdown = nn.ModuleList(nn.Linear(d, d) for _ in range(M - 1))
            self.flows = nn.ModuleList(FlowChain(d, cfg.flow_layers, generator=gen) for _ in range(M))
            self.phi_z = nn.ModuleList(MLPBlock([d, cfg.content_dim], "relu", cfg.dropout) for _ in range(M))
            self.dec_gcn = nn.ModuleList(GCNLayer(cfg.content_dim, cfg.gcn_dim) for _ in range(M))
            self.dec_rnn = nn.ModuleList(
                DilatedGRUCell(cfg.gcn_dim + (H if i else 0), H, scale=i + 1) for i in range(M)
            )
            self.fuse = MLPBlock([M * H, cfg.content_dim], "linear")
            self.bern_hidden = MLPBlock([cfg.content_dim, cfg.head_dim], "tanh")
            self.bern_weight = nn.Parameter(torch.empty(cfg.head_dim, cfg.head_dim))
            nn.init.xavier_uniform_(self.bern_weight)
            self.bern_bias = nn.Parameter(torch.zeros(()))
            self.gauss_hidden = MLPBlock([cfg.content_dim, cfg.head_dim], "tanh")
            self.gauss_mean = nn.Linear(cfg.head_dim, cfg.attr_dim)
            self.gauss_var = nn.Linear(cfg.head_dim, cfg.attr_dim)
            for lin in (*self.post_topdown, *self.prior_topdown, self.gauss_mean, self.gauss_var):
                nn.init.xavier_uniform_(lin.weight)
                nn.init.zeros_(lin.bias)
        self.double()

    def init_edge_bias(self, density: float) -> None:
        """Start the edge logits at the observed base rate instead of 0.5."""
        density = min(max(density, 1e-6), 1.0 - 1e-6)
        with torch.no_grad():
            self.bern_bias.fill_(float(np.log(density / (1.0 - density))))

    # -- state -------------------------------------------------------------
    def initial_state(self, n_nodes: int, n_samples: int = 1) -> EncoderState:
        return EncoderState.initial(self.config, n_nodes, n_samples)

    # -- pieces --------------------------------------------------------------
    def encode_features(self, state: EncoderState, x: torch.Tensor, norm_adj: torch.Tensor, training=False, generator=None):
        """Bottom-up content/GCN/DRNN pass; returns ST features per scale."""
        n, H = x.shape[0], self.config.drnn_hidden
        s = self.phi_x(x, training, generator)
        st_prev = None
        feats = []
        for i in range(self.config.scales):
            s = self.enc_gcn[i](norm_adj, s)
            inp = s if i == 0 else torch.cat([s, st_prev], -1)
            h_prev = state.lagged("enc_h", i, (n, H))
            st_prev = self.enc_rnn[i](h_prev, inp)
            feats.append(st_prev)
        return feats

    def prior_step(self, state: EncoderState) -> list[torch.Tensor]:
        """Prior DRNN hidden states per scale, from latent samples one dilation back."""
        S, n = state.n_samples, state.n_nodes
        d, H = self.config.latent_dim, self.config.drnn_hidden
        hidden = []
        for i in range(self.config.scales):
            z_prev = state.lagged("z_gauss", i, (S, n, d))
            h_prev = state.lagged("prior_h", i, (S, n, H))
            hidden.append(self.prior_rnn[i](h_prev, z_prev))
        return hidden

    def posterior_params(self, i: int, st: torch.Tensor, z_prev: torch.Tensor, upper, norm_adj) -> GaussianParams:
        parts = [st.expand(z_prev.shape[:-1] + st.shape[-1:]), z_prev]
        if upper is not None:
            parts.append(self.post_topdown[i](upper))
        return self.post_head[i](norm_adj, torch.cat(parts, -1))

    def prior_params(self, i: int, prior_hidden: torch.Tensor, upper) -> GaussianParams:
        parts = [prior_hidden]
        if upper is not None:
            parts.append(self.prior_topdown[i](upper))
        return self.prior_head[i](torch.cat(parts, -1))

    def fuse_posterior(self, posterior: GaussianParams, prior: GaussianParams) -> GaussianParams:
        return precision_merge(posterior, prior)

    def encode_step(self, state, snap: SnapshotTensors, noise=None, training=False, generator=None):
        """Hierarchical inference for one snapshot; does not touch ``state``.

        Returns a dict with per-scale ``posteriors`` (before sharing),
        ``priors``, ``merged``, ``samples`` plus the recurrent features.
        """
        cfg = self.config
        M, d = cfg.scales, cfg.latent_dim
        S, n = state.n_samples, state.n_nodes
        if snap.attributes.shape != (n, cfg.attr_dim):
            raise ValueError(
                f"snapshot attributes {tuple(snap.attributes.shape)} do not match ({n}, {cfg.attr_dim})"
            )
        if noise is None:
            noise = [torch.randn((S, n, d), generator=generator, dtype=torch.float64) for _ in range(M)]

        feats = self.encode_features(state, snap.attributes, snap.norm_adj, training, generator)
        prior_hidden = self.prior_step(state)

        posteriors, priors, merged, samples = [None] * M, [None] * M, [None] * M, [None] * M
        upper = None
        for i in reversed(range(M)):
            z_prev = state.lagged("z", i, (S, n, d))
            post = self.posterior_params(i, feats[i], z_prev, upper, snap.norm_adj)
            prior = self.prior_params(i, prior_hidden[i], upper)
            shared = self.fuse_posterior(post, prior) if (i < M - 1 and cfg.info_sharing) else post
            z_gauss = reparameterize(shared, noise[i])
            sample = self.flows[i](z_gauss, scale=i + 1)
            posteriors[i], priors[i], merged[i], samples[i] = post, prior, shared, sample
            upper = sample.z
        return {
            "posteriors": posteriors,
            "priors": priors,
            "merged": merged,
            "samples": samples,
            "enc_h": feats,
            "prior_h": prior_hidden,
        }

    def decode_step(self, samples: Sequence[LatentSample], norm_adj: torch.Tensor, state: EncoderState,
                    training=False, generator=None):
        """Returns (DecoderOutput, new decoder hidden states per scale)."""
        S, n, H = state.n_samples, state.n_nodes, self.config.drnn_hidden
        st_prev = None
        hidden = []
        for i, sample in enumerate(samples):
            c = self.phi_z[i](sample.z, training, generator)
            s = self.dec_gcn[i](norm_adj, c)
            inp = s if i == 0 else torch.cat([s, st_prev], -1)
            h_prev = state.lagged("dec_h", i, (S, n, H))
            st_prev = self.dec_rnn[i](h_prev, inp)
            hidden.append(st_prev)
        fused = self.fuse(torch.cat(hidden, -1))

        hb = self.bern_hidden(fused)
        logits = (hb @ self.bern_weight) @ hb.transpose(-2, -1) + self.bern_bias
        if not self.config.directed:
            logits = 0.5 * (logits + logits.transpose(-2, -1))
        probs = torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)

        hg = self.gauss_hidden(fused)
        out = DecoderOutput(
            edge_probs=probs,
            attr_mu=self.gauss_mean(hg),
            attr_sigma_sq=positive_variance(self.gauss_var(hg)),
            edge_logits=logits,
        )
        return out, hidden

    # -- full step ---------------------------------------------------------
    def forward_step(self, state: EncoderState, snap: SnapshotTensors, noise=None, training=False,
                     generator=None) -> TimestepResult:
        if state.t is not None and snap.t <= state.t:
            raise ValueError(f"snapshot t={snap.t} is not after the last committed t={state.t}")
        if snap.adjacency.shape != (state.n_nodes, state.n_nodes):
            raise ValueError(f"snapshot has {snap.adjacency.shape[0]} nodes, state expects {state.n_nodes}")
        enc = self.encode_step(state, snap, noise, training, generator)
        decoded, dec_h = self.decode_step(enc["samples"], state.decoder_adjacency(), state, training, generator)
        attrs = snap.attributes if self.config.attributed else None
        recon_a, recon_x, kl, recon_a_s = elbo_step(
            snap.adjacency, attrs, decoded, enc["merged"], enc["priors"], enc["samples"], list(self.flows)
        )
        return TimestepResult(
            t=snap.t,
            posteriors=enc["posteriors"],
            priors=enc["priors"],
            merged=enc["merged"],
            samples=enc["samples"],
            decoded=decoded,
            recon_a=recon_a,
            recon_x=recon_x,
            kl=kl,
            recon_a_samples=recon_a_s,
            pending={
                "enc_h": enc["enc_h"],
                "dec_h": dec_h,
                "prior_h": enc["prior_h"],
                "z": [s.z for s in enc["samples"]],
                "z_gauss": [s.z_gauss for s in enc["samples"]],
                "norm_adj": snap.norm_adj,
            },
        )

    def run(self, snapshots: Sequence[SnapshotTensors], state: EncoderState | None = None, training=False,
            generator=None, n_samples: int = 1):
        """Process a time-ordered sequence, committing after each step."""
        if state is None:
            state = self.initial_state(snapshots[0].adjacency.shape[0], n_samples)
        results = []
        for snap in snapshots:
            res = self.forward_step(state, snap, training=training, generator=generator)
            state = commit_state(state, res)
            results.append(res)
        return results, state


def commit_state(state: EncoderState, result: TimestepResult) -> EncoderState:
    """Push one timestep's hidden states and latents into the dilation buffers."""
    if state.t is not None and result.t <= state.t:
        raise ValueError(f"cannot commit t={result.t} after t={state.t}")
    out = EncoderState(state.n_nodes, state.n_samples, result.t, prev_norm_adj=result.pending["norm_adj"])
    for name in ("enc_h", "dec_h", "prior_h", "z", "z_gauss"):
        bufs = []
        for buf, new in zip(getattr(state, name), result.pending[name]):
            b = _ring(buf.maxlen, buf)
            b.append(new)
            bufs.append(b)
        setattr(out, name, bufs)
    return out


def _config_from_dict(raw: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in raw.items() if k in known})


def save_checkpoint(path: str, model: HVGRAE, thresholds: dict | None = None, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "thresholds": thresholds,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[HVGRAE, dict]:
    """Returns (model in eval mode, payload without the tensors)."""
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an H-VGRAE checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = HVGRAE(_config_from_dict(payload["config"]))
    model.load_state_dict(payload.pop("state_dict"))
    model.eval()
    return model, payload


def count_parameters(model: nn.Module) -> int:
    return sum(int(np.prod(p.shape)) for p in model.parameters())
