import numpy as np
import pytest
import torch

from otfm.toy import (DenseMapping, Gaussian, ToyConfig, bures_wasserstein_cost,
                      empirical_transport_cost, independent_pairing_cost, train_toy)


def _sym_sqrt(m):
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(w)) @ v.T


def monge_map_cost(a, b, n=400_000, seed=0):
    """Monte Carlo cost of the linear optimal map between Gaussians."""
    ra = _sym_sqrt(a.cov)
    ra_inv = np.linalg.inv(ra)
    A = ra_inv @ _sym_sqrt(ra @ b.cov @ ra) @ ra_inv
    x = np.random.default_rng(seed).multivariate_normal(a.mean, a.cov, size=n)
    y = b.mean + (x - a.mean) @ A.T
    return float(((y - x) ** 2).sum(1).mean()), y


def test_bures_wasserstein_matches_monge_map():
    a = Gaussian([0.5, 0], [[1.0, 0.3], [0.3, 0.8]])
    b = Gaussian([2.0, -1.0], [[2.0, 0.6], [0.6, 0.5]])
    mc, y = monge_map_cost(a, b)
    assert abs(bures_wasserstein_cost(a, b) - mc) / mc < 5e-3
    # the oracle map really pushes a onto b
    np.testing.assert_allclose(np.cov(y.T), b.cov, atol=2e-2)


def test_bures_wasserstein_closed_forms():
    one = Gaussian([1.0], [[4.0]])
    two = Gaussian([-1.0], [[1.0]])
    assert bures_wasserstein_cost(one, two) == pytest.approx(4.0 + 1.0)
    g = Gaussian([1, 2], [[2, 0.5], [0.5, 1]])
    assert bures_wasserstein_cost(g, g) == pytest.approx(0.0, abs=1e-12)
    shifted = Gaussian([2, 2], g.cov)
    assert bures_wasserstein_cost(g, shifted) == pytest.approx(1.0)
    assert bures_wasserstein_cost(g, two.__class__([0, 0], np.eye(2))) < \
        independent_pairing_cost(g, Gaussian([0, 0], np.eye(2)))
    assert independent_pairing_cost(one, two) == pytest.approx(4 + 4 + 1)


def test_gaussian_validation():
    with pytest.raises(ValueError):
        Gaussian([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValueError):
        Gaussian([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError):
        Gaussian([0, 0, 0], np.eye(2))


def test_gaussian_sampling_moments():
    g = Gaussian([1, -1], [[2, 0.6], [0.6, 0.5]])
    x = g.sample(200_000, torch.Generator().manual_seed(0)).double().numpy()
    np.testing.assert_allclose(x.mean(0), g.mean, atol=1e-2)
    np.testing.assert_allclose(np.cov(x.T), g.cov, atol=2e-2)


def test_untrained_map_is_identity():
    m = DenseMapping()
    x = torch.randn(16, 2)
    assert torch.equal(m.transport(x), x)
    assert empirical_transport_cost(m, Gaussian([0, 0], np.eye(2)), n=100) == 0.0


def test_short_training_is_deterministic():
    a, b = Gaussian([0, 0], np.eye(2)), Gaussian([1, 0], np.eye(2))
    cfg = ToyConfig(steps=20, batch_size=32)
    r1, r2 = train_toy(a, b, cfg), train_toy(a, b, cfg)
    assert r1.history == r2.history and r1.transport_cost == r2.transport_cost
    assert r1.transport_cost > 0
    assert r1.bures_wasserstein == pytest.approx(1.0)


def test_flow_term_runs():
    a, b = Gaussian([0, 0], np.eye(2)), Gaussian([1, 0], np.eye(2))
    r = train_toy(a, b, ToyConfig(steps=5, batch_size=16, weight_flow=1.0))
    assert len(r.history) == 5 and np.isfinite(r.history).all()
