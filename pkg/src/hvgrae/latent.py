"""Stochastic machinery: diagonal Gaussians, planar flows, precision merge, KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "VAR_FLOOR",
    "GaussianParams",
    "LatentSample",
    "PlanarFlow",
    "FlowChain",
    "positive_variance",
    "reparameterize",
    "planar_transform",
    "planar_forward",
    "constrain_u",
    "chain_forward",
    "gaussian_log_density",
    "log_density_flow",
    "precision_merge",
    "gaussian_kl",
    "kl_estimate",
]

VAR_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class GaussianParams(NamedTuple):
    """Diagonal Gaussian with per-element mean and variance."""

    mu: torch.Tensor
    sigma_sq: torch.Tensor


@dataclass
class LatentSample:
    z_gauss: torch.Tensor
    z: torch.Tensor
    log_det: torch.Tensor
    scale: int = 1


def positive_variance(raw: torch.Tensor) -> torch.Tensor:
    """Softplus head output floored at VAR_FLOOR."""
    return F.softplus(raw).clamp_min(VAR_FLOOR)


def reparameterize(params: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    mu, sigma_sq = params
    if noise.shape != mu.shape or sigma_sq.shape != mu.shape:
        raise ValueError(
            f"shape mismatch: mu {tuple(mu.shape)}, sigma_sq {tuple(sigma_sq.shape)}, noise {tuple(noise.shape)}"
        )
    return mu + noise * torch.sqrt(sigma_sq)


def constrain_u(u: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Map raw u to u_hat with w.u_hat = -1 + softplus(w.u) > -1."""
    wu = (w * u).sum(-1, keepdim=True)
    m = -1.0 + F.softplus(wu)
    # w = 0 leaves u unchanged (the flow is then the identity anyway)
    return u + (m - wu) * w / (w * w).sum(-1, keepdim=True).clamp_min(1e-30)


def planar_transform(z: torch.Tensor, u_hat: torch.Tensor, w: torch.Tensor, b: torch.Tensor):
    """z + u_hat * tanh(w.z + b) and log|1 + u_hat . psi(z)| over the last axis."""
    a = torch.tanh(z @ w + b)
    z_new = z + a.unsqueeze(-1) * u_hat
    psi_u = (1.0 - a * a) * (w @ u_hat)
    return z_new, torch.log(torch.abs(1.0 + psi_u))


class PlanarFlow(nn.Module):
    def __init__(self, dim: int, init_scale: float = 0.1, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.u = nn.Parameter(init_scale * torch.randn(dim, generator=generator, dtype=torch.float64))
        self.w = nn.Parameter(init_scale * torch.randn(dim, generator=generator, dtype=torch.float64))
        self.b = nn.Parameter(torch.zeros((), dtype=torch.float64))

    @property
    def u_hat(self) -> torch.Tensor:
        return constrain_u(self.u, self.w)

    def forward(self, z: torch.Tensor):
        return planar_forward(self, z)


def planar_forward(flow: PlanarFlow, z: torch.Tensor):
    return planar_transform(z, flow.u_hat, flow.w, flow.b)


class FlowChain(nn.Module):
    """Ordered stack of planar flows; an empty chain is the identity."""

    def __init__(self, dim: int, n_layers: int, generator: torch.Generator | None = None):
        super().__init__()
        if n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {n_layers}")
        self.dim = dim
        self.layers = nn.ModuleList(PlanarFlow(dim, generator=generator) for _ in range(n_layers))

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, z_gauss: torch.Tensor, scale: int = 1) -> LatentSample:
        return chain_forward(self, z_gauss, scale)


def chain_forward(chain: FlowChain, z_gauss: torch.Tensor, scale: int = 1) -> LatentSample:
    z = z_gauss
    log_det = z_gauss.new_zeros(z_gauss.shape[:-1])
    for flow in chain.layers:
        z, ld = planar_forward(flow, z)
        log_det = log_det + ld
    return LatentSample(z_gauss=z_gauss, z=z, log_det=log_det, scale=scale)


def gaussian_log_density(x: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Elementwise log N(x; mu, sigma_sq)."""
    mu, sigma_sq = params
    return -0.5 * (_LOG_2PI + torch.log(sigma_sq) + (x - mu) ** 2 / sigma_sq)


def log_density_flow(chain: FlowChain, base: GaussianParams, z_gauss: torch.Tensor) -> torch.Tensor:
    """log q(z) for z = chain(z_gauss), by change of variables; summed over the last axis."""
    return gaussian_log_density(z_gauss, base).sum(-1) - chain_forward(chain, z_gauss).log_det


def precision_merge(enc: GaussianParams, prior: GaussianParams) -> GaussianParams:
    prec_e = 1.0 / enc.sigma_sq
    prec_p = 1.0 / prior.sigma_sq
    var = 1.0 / (prec_e + prec_p)
    return GaussianParams((enc.mu * prec_e + prior.mu * prec_p) * var, var)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis."""
    ratio = q.sigma_sq / p.sigma_sq
    return 0.5 * (ratio + (q.mu - p.mu) ** 2 / p.sigma_sq - 1.0 - torch.log(ratio)).sum(-1)


def kl_estimate(
    posterior: tuple[GaussianParams, FlowChain],
    prior: tuple[GaussianParams, FlowChain],
    z_gauss_sample: torch.Tensor,
) -> torch.Tensor:
    """Single-sample estimate of log q(z) - log p(z) per node.

    With a shared chain both densities pick up the same log-det at the same
    pre-image, so only the base Gaussian terms survive.
    """
    post_params, post_chain = posterior
    prior_params, prior_chain = prior
    if post_chain is not prior_chain:
        raise NotImplementedError("KL between distinct flow chains needs a flow inverse; share the chain")
    return (
        gaussian_log_density(z_gauss_sample, post_params) - gaussian_log_density(z_gauss_sample, prior_params)
    ).sum(-1)
