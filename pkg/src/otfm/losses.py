"""Pansharpening-regularised transport cost and the two adversarial UOT objectives.

All norms use mean reduction so magnitudes do not depend on patch or batch
size. Costs are returned per sample, shape ``(N,)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch

from .degradation import (MtfSpec, band_combination, degrade_spatial, degrade_spectral,
                          fit_band_weights, pan_lowpass)

SPECTRAL_VARIANTS = ("observation", "detail_ratio")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class CostConfig:
    lambda_base: float = 1.0
    lambda_spatial: float = 1.0
    lambda_spectral: float = 1.0
    spectral_variant: str = "observation"
    exp_clamp: float = 30.0

    def __post_init__(self):
        if min(self.lambda_base, self.lambda_spatial, self.lambda_spectral) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.exp_clamp <= 0:
            raise ValueError("exp_clamp must be positive")
        if self.spectral_variant not in SPECTRAL_VARIANTS:
            raise ValueError(f"spectral_variant must be one of {SPECTRAL_VARIANTS}")


class CostTerms(NamedTuple):
    base: torch.Tensor
    spatial: torch.Tensor
    spectral: torch.Tensor


@dataclass
class LossBreakdown:
    flow: float
    mapping: float
    potential: float
    cost_terms: Tuple[float, float, float]

    def is_finite(self) -> bool:
        vals = (self.flow, self.mapping, self.potential) + tuple(self.cost_terms)
        return all(v == v and abs(v) != float("inf") for v in vals)


def _per_sample_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).flatten(1).mean(1)


def quadratic_cost(x, y) -> torch.Tensor:
    """Mean squared difference; per sample when inputs are batched 4-D tensors."""
    x = torch.as_tensor(x)
    y = torch.as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 4:
        return _per_sample_mse(x, y)
    return (x - y).pow(2).mean()


@dataclass
class CostContext:
    """Per-sample quantities that do not depend on the fused image."""

    weights: torch.Tensor
    bias: torch.Tensor
    p_hat: Optional[torch.Tensor] = None
    p_low: Optional[torch.Tensor] = None


def cost_context(p: torch.Tensor, y0_up: torch.Tensor, mtf: MtfSpec, cfg: CostConfig) -> CostContext:
    """Spectral-matching weights of ``p`` against upsampled LRMS (and p_hat/p_L if needed)."""
    w, b, _ = fit_band_weights(p, y0_up)
    ctx = CostContext(w, b)
    if cfg.spectral_variant == "detail_ratio":
        fitted = band_combination(y0_up.detach().double(), w, b)
        mu_f = fitted.mean(dim=(1, 2, 3), keepdim=True)
        sd_f = fitted.std(dim=(1, 2, 3), unbiased=False, keepdim=True).clamp_min(1e-12)
        pd = p.detach().double()
        p_hat = (fitted - mu_f) / sd_f * pd.std(dim=(1, 2, 3), unbiased=False, keepdim=True) \
            + pd.mean(dim=(1, 2, 3), keepdim=True)
        ctx.p_hat = p_hat.to(p.dtype)
        ctx.p_low = pan_lowpass(ctx.p_hat, mtf)
    return ctx


def regularized_cost(y0_up: torch.Tensor, y_hat: torch.Tensor, p: torch.Tensor, m: torch.Tensor,
                     cfg: CostConfig, mtf: MtfSpec,
                     context: Optional[CostContext] = None) -> Tuple[torch.Tensor, CostTerms]:
    """Per-sample ``lb * c(y0, y) + ls * |p - G(y)|^2 + lsp * spectral(y, m)``.

    ``G`` is the least-squares band combination fitted between ``p`` and
    ``y0_up``. The spectral term compares ``degrade_spatial(y)`` with ``m``
    ("observation") or the detail-ratio estimate with ``y0_up`` ("detail_ratio").
    """
    if y0_up.shape != y_hat.shape:
        raise ValueError("y0_up and y_hat must share a shape")
    ctx = context if context is not None else cost_context(p, y0_up, mtf, cfg)
    zero = torch.zeros(y_hat.shape[0], dtype=y_hat.dtype)
    base = _per_sample_mse(y_hat, y0_up) if cfg.lambda_base > 0 else zero
    spatial = zero
    if cfg.lambda_spatial > 0:
        spatial = _per_sample_mse(band_combination(y_hat, ctx.weights, ctx.bias), p)
    spectral = zero
    if cfg.lambda_spectral > 0:
        if cfg.spectral_variant == "observation":
            spectral = _per_sample_mse(degrade_spatial(y_hat, mtf), m)
        else:
            m_tilde = degrade_spectral(y_hat, ctx.p_hat, ctx.p_low, mtf)
            spectral = _per_sample_mse(m_tilde, y0_up)
    total = cfg.lambda_base * base + cfg.lambda_spatial * spatial + cfg.lambda_spectral * spectral
    return total, CostTerms(base, spatial, spectral)


def entropy_f(z: torch.Tensor, clamp: float) -> torch.Tensor:
    """``exp`` with its argument clamped to ``[-clamp, clamp]``."""
    return torch.exp(torch.clamp(z, -clamp, clamp))


def mapping_loss(cost: torch.Tensor, potential_value: torch.Tensor) -> torch.Tensor:
    """``mean(c~(y0, y1_hat) - v(y1_hat, t))``.

    Only the mapping network is meant to be updated with this loss; callers
    restrict the backward pass to its parameters.
    """
    if not torch.isfinite(potential_value).all():
        raise NonFiniteLossError(
            f"non-finite potential values: {potential_value.detach().flatten().tolist()[:8]}"
        )
    return (cost - potential_value).mean()


def potential_loss(cost: torch.Tensor, v_fake: torch.Tensor, v_real: torch.Tensor,
                   cfg: CostConfig) -> torch.Tensor:
    """``mean f(-c~ + v(y1_hat)) + mean f(-v(y1))`` with ``f = exp`` (clamped).

    ``cost`` is detached here; gradients reach the potential network only.
    """
    return (entropy_f(-cost.detach() + v_fake, cfg.exp_clamp).mean()
            + entropy_f(-v_real, cfg.exp_clamp).mean())


def flow_loss(v_hat: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    return (v_hat - v_target).pow(2).mean()
