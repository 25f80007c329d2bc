import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hvgrae.latent import (
    VAR_FLOOR,
    FlowChain,
    GaussianParams,
    PlanarFlow,
    chain_forward,
    constrain_u,
    gaussian_kl,
    gaussian_log_density,
    kl_estimate,
    log_density_flow,
    planar_forward,
    planar_transform,
    positive_variance,
    precision_merge,
    reparameterize,
)

D = torch.float64
LOG_E_MINUS_1 = math.log(math.e - 1.0)


def t(x):
    return torch.as_tensor(x, dtype=D)


def numeric_jacobian(fn, z, h=1e-6):
    d = z.numel()
    jac = np.empty((d, d))
    for k in range(d):
        e = torch.zeros_like(z)
        e[k] = h
        jac[:, k] = ((fn(z + e) - fn(z - e)) / (2 * h)).numpy()
    return jac


def identity_flow(dim, seed=0):
    """Planar flow whose effective u_hat is exactly zero."""
    flow = PlanarFlow(dim, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        w = flow.w
        flow.u.copy_(LOG_E_MINUS_1 * w / (w * w).sum())
    return flow


def test_positive_variance_floor():
    out = positive_variance(t([-100.0, 0.0, 3.0]))
    assert out[0] == VAR_FLOOR
    assert out[1].item() == pytest.approx(math.log(2.0))


def test_reparameterize_examples():
    mu = t([[1.0, -2.0]])
    torch.testing.assert_close(reparameterize(GaussianParams(mu, t([[2.0, 3.0]])), torch.zeros(1, 2, dtype=D)), mu)
    floor = GaussianParams(mu, positive_variance(t([[-100.0, -100.0]])))
    noise = t([[1.0, -2.0]])
    torch.testing.assert_close(reparameterize(floor, noise), mu + 1e-3 * noise)
    assert reparameterize(GaussianParams(t([0.0]), t([4.0])), t([1.5])).item() == 3.0
    with pytest.raises(ValueError):
        reparameterize(GaussianParams(mu, t([[1.0, 1.0]])), torch.zeros(2, 2, dtype=D))


def test_planar_zero_u_is_identity():
    z = torch.randn(5, 3, dtype=D)
    z2, ld = planar_transform(z, torch.zeros(3, dtype=D), torch.randn(3, dtype=D), t(0.3))
    torch.testing.assert_close(z2, z, rtol=0, atol=0)
    assert torch.count_nonzero(ld) == 0


def test_planar_scalar_example_against_numeric_jacobian():
    u, w, b = t([0.5]), t([1.0]), t(0.0)
    z2, ld = planar_transform(t([[0.0]]), u, w, b)
    assert z2.item() == 0.0
    assert ld.item() == pytest.approx(math.log(1.5), abs=1e-15)
    jac = numeric_jacobian(lambda z: planar_transform(z[None], u, w, b)[0][0], t([0.0]))
    assert abs(math.log(abs(np.linalg.det(jac))) - ld.item()) < 1e-9


@pytest.mark.parametrize("raw_u", [-2.0, -0.3, 0.0, 1.7])
def test_u_hat_reparameterization_scalar(raw_u):
    u_hat = constrain_u(t([raw_u]), t([1.0]))
    expected = -1.0 + math.log1p(math.exp(raw_u))
    assert u_hat.item() == pytest.approx(expected, abs=1e-15)


@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.05, 4.0))
@settings(max_examples=80, deadline=None)
def test_invertibility_certificate(dim, seed, scale):
    g = torch.Generator().manual_seed(seed)
    u = scale * torch.randn(dim, generator=g, dtype=D)
    w = scale * torch.randn(dim, generator=g, dtype=D)
    if (w @ u).abs() > 20:
        return
    assert (w @ constrain_u(u, w)).item() >= -1.0 + 1e-9


def test_constructed_flows_satisfy_certificate():
    for seed in range(50):
        flow = PlanarFlow(3, init_scale=1.0, generator=torch.Generator().manual_seed(seed))
        assert (flow.w @ flow.u_hat).item() >= -1.0 + 1e-9


def test_chain_identity_cases():
    z = torch.randn(4, 3, dtype=D)
    s = chain_forward(FlowChain(3, 0), z, scale=2)
    assert s.z is z and s.scale == 2 and torch.count_nonzero(s.log_det) == 0
    chain = FlowChain(3, 0)
    chain.layers.extend([identity_flow(3, 1), identity_flow(3, 2)])
    s = chain_forward(chain, z)
    torch.testing.assert_close(s.z, z, atol=1e-15, rtol=0)
    assert s.log_det.abs().max() < 1e-15
    with pytest.raises(ValueError):
        FlowChain(3, -1)


def _random_chain(dim, n_layers, seed):
    g = torch.Generator().manual_seed(seed)
    chain = FlowChain(dim, n_layers, generator=g)
    with torch.no_grad():
        for f in chain.layers:
            f.u.copy_(torch.randn(dim, generator=g, dtype=D))
            f.w.copy_(torch.randn(dim, generator=g, dtype=D))
            f.b.copy_(torch.randn((), generator=g, dtype=D))
    return chain, g


def test_three_layer_chain_matches_numeric_jacobian():
    for seed in range(5):
        chain, g = _random_chain(3, 3, seed)
        z = torch.randn(3, generator=g, dtype=D)
        with torch.no_grad():
            ld = chain_forward(chain, z[None]).log_det.item()
            jac = numeric_jacobian(lambda v: chain_forward(chain, v[None]).z[0], z)
        assert abs(math.log(abs(np.linalg.det(jac))) - ld) < 1e-6


def test_log_density_flow_examples():
    base = GaussianParams(t([[0.7]]), t([[1.0]]))
    got = log_density_flow(FlowChain(1, 0), base, t([[0.7]]))
    assert got.item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert got.item() == pytest.approx(-0.9189, abs=1e-4)

    chain = FlowChain(2, 0)
    chain.layers.append(identity_flow(2, 3))
    base = GaussianParams(torch.randn(3, 2, dtype=D), torch.rand(3, 2, dtype=D) + 0.5)
    zg = torch.randn(3, 2, dtype=D)
    torch.testing.assert_close(log_density_flow(chain, base, zg), gaussian_log_density(zg, base).sum(-1))


def test_log_density_flow_matches_numeric_density():
    chain, g = _random_chain(2, 1, 11)
    base = GaussianParams(torch.randn(2, generator=g, dtype=D), torch.rand(2, generator=g, dtype=D) + 0.3)
    zg = torch.randn(2, generator=g, dtype=D)
    with torch.no_grad():
        got = log_density_flow(chain, GaussianParams(base.mu[None], base.sigma_sq[None]), zg[None]).item()
        jac = numeric_jacobian(lambda v: chain_forward(chain, v[None]).z[0], zg)
    base_lp = sum(
        -0.5 * math.log(2 * math.pi * s) - 0.5 * (x - m) ** 2 / s
        for x, m, s in zip(zg.tolist(), base.mu.tolist(), base.sigma_sq.tolist())
    )
    assert abs(got - (base_lp - math.log(abs(np.linalg.det(jac))))) < 1e-6


def test_precision_merge_examples():
    m = precision_merge(GaussianParams(t([0.0]), t([1.0])), GaussianParams(t([0.0]), t([1.0])))
    assert m.mu.item() == 0.0 and m.sigma_sq.item() == 0.5
    m = precision_merge(GaussianParams(t([2.0]), t([1.0])), GaussianParams(t([-5.0]), t([1e8])))
    assert m.mu.item() == pytest.approx(2.0, abs=1e-6)
    assert m.sigma_sq.item() == pytest.approx(1.0, abs=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_precision_merge_swap_symmetry_and_shrinkage(seed):
    g = torch.Generator().manual_seed(seed)
    a = GaussianParams(torch.randn(3, 2, generator=g, dtype=D), torch.rand(3, 2, generator=g, dtype=D) + 1e-3)
    b = GaussianParams(torch.randn(3, 2, generator=g, dtype=D), torch.rand(3, 2, generator=g, dtype=D) + 1e-3)
    ab, ba = precision_merge(a, b), precision_merge(b, a)
    torch.testing.assert_close(ab.mu, ba.mu, atol=1e-12, rtol=1e-12)
    torch.testing.assert_close(ab.sigma_sq, ba.sigma_sq, atol=1e-15, rtol=1e-12)
    assert (ab.sigma_sq <= torch.minimum(a.sigma_sq, b.sigma_sq) + 1e-15).all()


def test_kl_estimate_zero_for_identical():
    chain = FlowChain(2, 2, generator=torch.Generator().manual_seed(0))
    p = GaussianParams(torch.randn(5, 2, dtype=D), torch.rand(5, 2, dtype=D) + 0.1)
    zg = reparameterize(p, torch.randn(5, 2, dtype=D))
    assert torch.count_nonzero(kl_estimate((p, chain), (p, chain), zg)) == 0


def test_kl_estimate_requires_shared_chain():
    p = GaussianParams(torch.zeros(1, 2, dtype=D), torch.ones(1, 2, dtype=D))
    with pytest.raises(NotImplementedError):
        kl_estimate((p, FlowChain(2, 1)), (p, FlowChain(2, 1)), torch.zeros(1, 2, dtype=D))


def test_kl_mean_shift_identity():
    delta, var = 0.8, 2.5
    q = GaussianParams(t([[delta, delta, delta]]), t([[var] * 3]))
    p = GaussianParams(t([[0.0] * 3]), t([[var] * 3]))
    assert gaussian_kl(q, p).item() == pytest.approx(3 * delta**2 / (2 * var), abs=1e-15)


def test_kl_estimate_converges_to_closed_form():
    g = torch.Generator().manual_seed(5)
    chain = FlowChain(3, 0)
    q = GaussianParams(torch.randn(1, 3, generator=g, dtype=D), torch.rand(1, 3, generator=g, dtype=D) + 0.2)
    p = GaussianParams(torch.randn(1, 3, generator=g, dtype=D), torch.rand(1, 3, generator=g, dtype=D) + 0.2)
    zg = reparameterize(GaussianParams(q.mu.expand(10_000, 3), q.sigma_sq.expand(10_000, 3)),
                        torch.randn(10_000, 3, generator=g, dtype=D))
    est = kl_estimate((GaussianParams(q.mu.expand_as(zg), q.sigma_sq.expand_as(zg)), chain),
                      (GaussianParams(p.mu.expand_as(zg), p.sigma_sq.expand_as(zg)), chain), zg)
    se = est.std().item() / math.sqrt(len(est))
    assert abs(est.mean().item() - gaussian_kl(q, p).item()) < 3 * se


@given(st.integers(0, 10_000), st.floats(1.0, 50.0))
@settings(max_examples=30, deadline=None)
def test_kl_monotone_in_prior_variance_inflation(seed, factor):
    g = torch.Generator().manual_seed(seed)
    q = GaussianParams(torch.randn(2, 3, generator=g, dtype=D), torch.rand(2, 3, generator=g, dtype=D) + 0.1)
    p = GaussianParams(torch.randn(2, 3, generator=g, dtype=D), q.sigma_sq * (0.5 + torch.rand(2, 3, generator=g, dtype=D)))
    # inflation never lowers the KL once the prior is at least as wide as the posterior
    p = GaussianParams(p.mu, torch.maximum(p.sigma_sq, q.sigma_sq + (q.mu - p.mu) ** 2))
    wider = GaussianParams(p.mu, p.sigma_sq * factor)
    assert (gaussian_kl(q, wider) >= gaussian_kl(q, p) - 1e-12).all()


def test_planar_and_merge_gradients():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(4, 3, generator=g, dtype=D, requires_grad=True)
    u = torch.randn(3, generator=g, dtype=D, requires_grad=True)
    w = torch.randn(3, generator=g, dtype=D, requires_grad=True)
    b = torch.randn((), generator=g, dtype=D, requires_grad=True)
    assert torch.autograd.gradcheck(lambda *a: planar_transform(a[0], constrain_u(a[1], a[2]), a[2], a[3]),
                                    (z, u, w, b))
    mu1, mu2 = (torch.randn(3, 2, generator=g, dtype=D, requires_grad=True) for _ in range(2))
    v1, v2 = ((torch.rand(3, 2, generator=g, dtype=D) + 0.1).requires_grad_() for _ in range(2))
    assert torch.autograd.gradcheck(
        lambda a, b_, c, d_: tuple(precision_merge(GaussianParams(a, b_), GaussianParams(c, d_))), (mu1, v1, mu2, v2)
    )
