"""Two-dimensional Gaussian transport problem for checking the UOT objective.

A small dense mapping network ``T(x) = x + v(x, t=1)`` is trained against a dense
potential network with the same mapping/potential losses as the image model.
The empirical transport cost ``E|T(x) - x|^2`` can then be compared with the
closed-form Bures-Wasserstein cost between the two Gaussians.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg
import torch
from torch import nn

from .flow import interpolate, reconstruct_endpoint, sample_times, velocity_target
from .losses import CostConfig, flow_loss, mapping_loss, potential_loss
from .networks import ema_state, ema_update


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be symmetric positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        chol = torch.from_numpy(np.linalg.cholesky(self.cov)).float()
        z = torch.randn(n, self.mean.size, generator=generator)
        return z @ chol.T + torch.from_numpy(self.mean).float()


def bures_wasserstein_cost(a: Gaussian, b: Gaussian) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    root_b = scipy.linalg.sqrtm(b.cov)
    cross = scipy.linalg.sqrtm(root_b @ a.cov @ root_b)
    value = (np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov)
             - 2.0 * np.trace(np.real(cross)))
    return float(max(value, 0.0))


def independent_pairing_cost(a: Gaussian, b: Gaussian) -> float:
    """``E|x - y|^2`` for independent ``x ~ a``, ``y ~ b`` (sample-index pairing)."""
    return float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov))


def _mlp(n_in: int, n_out: int, width: int, depth: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    d = n_in
    for _ in range(depth):
        layers += [nn.Linear(d, width), nn.SiLU()]
        d = width
    layers.append(nn.Linear(d, n_out))
    return nn.Sequential(*layers)


class DenseMapping(nn.Module):
    """Velocity field ``v(x, t)`` for low-dimensional points; zero output at init."""

    def __init__(self, dim: int = 2, width: int = 64, depth: int = 3):
        super().__init__()
        self.net = _mlp(dim + 1, dim, width, depth)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([x, t.reshape(-1, 1).to(x.dtype)], dim=1))

    def transport(self, x: torch.Tensor) -> torch.Tensor:
        """One-step map ``x + v(x, 1)``."""
        return x + self(x, torch.ones(x.shape[0], dtype=x.dtype))


class DensePotential(nn.Module):
    def __init__(self, dim: int = 2, width: int = 64, depth: int = 3):
        super().__init__()
        self.net = _mlp(dim, 1, width, depth)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y).squeeze(1)


@dataclass
class ToyConfig:
    steps: int = 3000
    batch_size: int = 256
    lr_mapping: float = 1e-3
    lr_potential: float = 1e-3
    cost_scale: float = 0.01    # cost = cost_scale * |x - y|^2; smaller is closer to balanced OT
    weight_flow: float = 0.0
    width: int = 64
    depth: int = 3
    exp_clamp: float = 30.0
    ema_decay: float = 0.99
    seed: int = 0


@dataclass
class ToyResult:
    mapping: DenseMapping       # EMA weights
    potential: DensePotential
    transport_cost: float
    bures_wasserstein: float
    identity_cost: float
    history: List[float]


def _cost(x: torch.Tensor, y: torch.Tensor, scale: float) -> torch.Tensor:
    return scale * ((x - y) ** 2).sum(dim=1)


def empirical_transport_cost(mapping: DenseMapping, source: Gaussian, n: int = 20000,
                             seed: int = 1) -> float:
    g = torch.Generator().manual_seed(seed)
    x = source.sample(n, g)
    with torch.no_grad():
        return float(((mapping.transport(x) - x) ** 2).sum(dim=1).mean())


def train_toy(source: Gaussian, target: Gaussian, cfg: Optional[ToyConfig] = None) -> ToyResult:
    """Train the one-step map from ``source`` to ``target`` with the UOT objective.

    Flow pairs are independent draws, so ``weight_flow`` defaults to 0: the flow
    term alone would pull the one-step map toward the target mean.
    """
    cfg = cfg or ToyConfig()
    dim = source.mean.size
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        mapping = DenseMapping(dim, cfg.width, cfg.depth)
        potential = DensePotential(dim, cfg.width, cfg.depth)
    g = torch.Generator().manual_seed(cfg.seed)
    opt_m = torch.optim.Adam(mapping.parameters(), lr=cfg.lr_mapping, betas=(0.5, 0.9))
    opt_p = torch.optim.Adam(potential.parameters(), lr=cfg.lr_potential, betas=(0.5, 0.9))
    cost_cfg = CostConfig(exp_clamp=cfg.exp_clamp)
    map_params, pot_params = list(mapping.parameters()), list(potential.parameters())
    shadow = ema_state(mapping)
    history = []
    for _ in range(cfg.steps):
        x0 = source.sample(cfg.batch_size, g)
        x1 = target.sample(cfg.batch_size, g)
        if cfg.weight_flow > 0:
            t = sample_times(cfg.batch_size, g)
        else:
            t = torch.ones(cfg.batch_size)
        state = interpolate(x0, x1, t)
        v_hat = mapping(state.y_t, t)
        y_hat = reconstruct_endpoint(state, v_hat)
        cost = _cost(x0, y_hat, cfg.cost_scale)
        v_fake = potential(y_hat)
        loss_t = mapping_loss(cost, v_fake)
        if cfg.weight_flow > 0:
            loss_t = loss_t + cfg.weight_flow * flow_loss(v_hat, velocity_target(x0, x1).v)
        grads = torch.autograd.grad(loss_t, map_params, retain_graph=True)
        for p, gr in zip(map_params, grads):
            p.grad = gr
        loss_v = potential_loss(cost, v_fake, potential(x1), cost_cfg)
        grads = torch.autograd.grad(loss_v, pot_params)
        for p, gr in zip(pot_params, grads):
            p.grad = gr
        opt_m.step()
        opt_p.step()
        ema_update(shadow, mapping, cfg.ema_decay)
        history.append(float(loss_t.detach()))
    mapping.load_state_dict(shadow)
    return ToyResult(mapping, potential, empirical_transport_cost(mapping, source),
                     bures_wasserstein_cost(source, target),
                     independent_pairing_cost(source, target), history)
