"""Conditional U-net mapping network, t-conditioned patch potential network and EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._natten import neighborhood_attention


@dataclass
class MappingNetConfig:
    bands: int = 4
    base_channels: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    attention_window: int = 7
    heads: int = 4
    ffn_expansion: int = 2
    patch_size: int = 2
    cond_channels: int = 0  # 0 -> base_channels
    time_embed_dim: int = 0  # 0 -> 4 * base_channels

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.attention_window < 1 or self.attention_window % 2 == 0:
            raise ValueError("attention_window must be odd")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.base_channels % self.heads:
            raise ValueError("base_channels must be divisible by heads")
        if self.cond_channels <= 0:
            self.cond_channels = self.base_channels
        if self.time_embed_dim <= 0:
            self.time_embed_dim = 4 * self.base_channels

    @property
    def cond_bands(self) -> int:
        return self.bands + 1

    @property
    def out_bands(self) -> int:
        return self.bands

    @property
    def size_multiple(self) -> int:
        return self.patch_size * 2 ** (self.levels - 1)


@dataclass
class PotentialNetConfig:
    bands: int = 4
    channels: int = 64
    blocks: int = 3
    time_embed_dim: int = 64
    slope: float = 0.2
    condition_on_inputs: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[cos(t w_k), sin(t w_k)]`` of shape ``(N, dim)``."""
    dtype = t.dtype if t.is_floating_point() else torch.float32
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype).reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def channel_layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Affine-free layer norm across the channel axis of an NCHW tensor."""
    mu = x.mean(1, keepdim=True)
    var = (x - mu).pow(2).mean(1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


class NeighborhoodAttention(nn.Module):
    """Multi-head self-attention over each pixel's ``window x window`` neighbourhood.

    Positions outside the image are masked, so the receptive field of one layer
    is exactly the clipped neighbourhood. A learned relative position bias per
    head gives the layer a sense of direction.
    """

    def __init__(self, channels: int, heads: int, window: int):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.window = window
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.rel_bias = nn.Parameter(torch.zeros(heads, window * window))
        self.scale = (channels // heads) ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        N, C, H, W = x.shape
        h = self.heads
        d = C // h
        q, key, val = self.qkv(x).chunk(3, dim=1)

        def split(z):
            return z.reshape(N, h, d, H, W)

        out = neighborhood_attention(split(q * self.scale), split(key), split(val),
                                     self.rel_bias, self.window)
        return self.proj(out.reshape(N, C, H, W))


class FeedForward(nn.Module):
    """Three pointwise linear layers with GELU in between."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = channels * expansion
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 1), nn.GELU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        return self.net(x)


class AdaLNZero(nn.Module):
    """``x + gamma * ((1 + alpha) * op(LN(x)) + beta)`` with condition-driven alpha, beta, gamma.

    The projection producing (alpha, beta, gamma) is zero-initialised, so a
    fresh block returns its input unchanged.
    """

    def __init__(self, channels: int, cond_channels: int, time_dim: int, op: nn.Module):
        super().__init__()
        self.op = op
        self.time_proj = nn.Linear(time_dim, cond_channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(cond_channels, cond_channels, 1), nn.SiLU(),
            nn.Conv2d(cond_channels, 3 * channels, 1),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def modulation(self, cond: torch.Tensor, temb: Optional[torch.Tensor]):
        h = channel_layer_norm(cond)
        if temb is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        return self.mlp(h).chunk(3, dim=1)

    def forward(self, x, cond, temb=None, params=None):
        if cond.shape[-2:] != x.shape[-2:] or cond.shape[0] != x.shape[0]:
            raise ValueError(f"condition {tuple(cond.shape)} not aligned with features {tuple(x.shape)}")
        alpha, beta, gamma = params if params is not None else self.modulation(cond, temb)
        x_op = (1 + alpha) * self.op(channel_layer_norm(x)) + beta
        return x + gamma * x_op


def adaln_block(x, cond, op, alpha, beta, gamma):
    """Functional AdaLN-zero update with explicit modulation tensors."""
    if cond is not None and cond.shape[-2:] != x.shape[-2:]:
        raise ValueError("condition not aligned with features")
    x_op = (1 + alpha) * op(channel_layer_norm(x)) + beta
    return x + gamma * x_op


class BasicBlock(nn.Module):
    def __init__(self, channels, cond_channels, time_dim, heads, window, expansion):
        super().__init__()
        self.attn = AdaLNZero(channels, cond_channels, time_dim,
                              NeighborhoodAttention(channels, heads, window))
        self.ffn = AdaLNZero(channels, cond_channels, time_dim, FeedForward(channels, expansion))

    def forward(self, x, cond, temb):
        return self.ffn(self.attn(x, cond, temb), cond, temb)


class MappingNet(nn.Module):
    """U-net velocity network ``s(y_t, t, m_up, p)``.

    ``m_up`` is the LRMS already upsampled to the PAN grid. Conditions enter
    only through the AdaLN-zero blocks; the head is zero-initialised so the
    network predicts zero velocity before training.
    """

    def __init__(self, cfg: MappingNetConfig):
        super().__init__()
        self.cfg = cfg
        C, L = cfg.base_channels, cfg.levels
        widths = [C * 2**i for i in range(L)]
        tdim = cfg.time_embed_dim
        self.widths = widths
        self.time_mlp = nn.Sequential(nn.Linear(C, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        cc = cfg.cond_channels
        ps = cfg.patch_size
        self.cond_encoder = nn.Sequential(
            nn.PixelUnshuffle(ps),
            nn.Conv2d(cfg.cond_bands * ps * ps, cc, 3, padding=1), nn.SiLU(),
            nn.Conv2d(cc, cc, 3, padding=1),
        )
        self.stem = nn.Sequential(nn.PixelUnshuffle(ps), nn.Conv2d(cfg.out_bands * ps * ps, C, 3, padding=1))

        def blocks(width):
            heads = min(cfg.heads, width)
            return nn.ModuleList(
                BasicBlock(width, cc, tdim, heads, cfg.attention_window, cfg.ffn_expansion)
                for _ in range(cfg.blocks_per_level)
            )

        self.encoder = nn.ModuleList(blocks(w) for w in widths)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(L - 1)
        )
        self.up = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                          nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            for i in range(L - 1)
        )
        self.merge = nn.ModuleList(nn.Conv2d(2 * w, w, 1) for w in widths)
        self.decoder = nn.ModuleList(blocks(w) for w in widths)
        self.head = nn.Sequential(nn.Conv2d(C, cfg.out_bands * ps * ps, 3, padding=1), nn.PixelShuffle(ps))
        nn.init.zeros_(self.head[0].weight)
        nn.init.zeros_(self.head[0].bias)

    def check_input(self, y_t, m_up, p):
        N, B, H, W = y_t.shape
        if B != self.cfg.out_bands or m_up.shape[1] != self.cfg.bands or p.shape[1] != 1:
            raise ValueError("band counts do not match the network configuration")
        if m_up.shape[-2:] != (H, W) or p.shape[-2:] != (H, W):
            raise ValueError("m_up and p must be at the resolution of y_t")
        k = self.cfg.size_multiple
        if H % k or W % k:
            raise ValueError(f"input {H}x{W} not divisible by {k}")

    def forward(self, y_t, t, m_up, p):
        self.check_input(y_t, m_up, p)
        t = torch.as_tensor(t, dtype=y_t.dtype).reshape(-1).expand(y_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        cond = self.cond_encoder(torch.cat([m_up, p], dim=1))
        conds = [cond]
        for _ in range(1, self.cfg.levels):
            conds.append(F.avg_pool2d(conds[-1], 2))

        x = self.stem(y_t)
        skips = []
        for lvl, level_blocks in enumerate(self.encoder):
            for blk in level_blocks:
                x = blk(x, conds[lvl], temb)
            skips.append(x)
            if lvl < len(self.down):
                x = self.down[lvl](x)
        for lvl in reversed(range(self.cfg.levels)):
            x = self.merge[lvl](torch.cat([x, skips[lvl]], dim=1))
            for blk in self.decoder[lvl]:
                x = blk(x, conds[lvl], temb)
            if lvl > 0:
                x = self.up[lvl - 1](x)
        return self.head(x)


class PotentialNet(nn.Module):
    """t-conditioned patch critic returning one scalar per sample."""

    def __init__(self, cfg: PotentialNetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        widths = [c * 2**i for i in range(cfg.blocks)]
        strides = [2, 2] + [1] * max(cfg.blocks - 2, 0)
        in_ch = cfg.bands + (cfg.bands + 1 if cfg.condition_on_inputs else 0)
        layers = []
        for w, s in zip(widths, strides):
            layers.append(nn.Sequential(
                nn.Conv2d(in_ch, w, 4 if s == 2 else 3, stride=s, padding=1),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(cfg.slope),
            ))
            in_ch = w
        self.blocks = nn.ModuleList(layers)
        self.time_proj = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, widths[0]), nn.LeakyReLU(cfg.slope),
            nn.Linear(widths[0], widths[0]),
        )
        self.out = nn.Conv2d(widths[-1], 1, 1)
        # Zero output layer: v == 0 at init, so the mapping first sees the cost alone.
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, y, t, cond=None):
        t = torch.as_tensor(t, dtype=y.dtype).reshape(-1).expand(y.shape[0])
        if self.cfg.condition_on_inputs:
            if cond is None:
                raise ValueError("potential network configured with conditioning needs cond")
            y = torch.cat([y, cond], dim=1)
        h = self.blocks[0](y)
        h = h + self.time_proj(timestep_embedding(t, self.cfg.time_embed_dim))[:, :, None, None]
        for blk in self.blocks[1:]:
            h = blk(h)
        return self.out(h).flatten(1).mean(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# EMA


def ema_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    """Detached copy of parameters and floating buffers."""
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


@torch.no_grad()
def ema_update(shadow: Dict[str, torch.Tensor], live, decay: float) -> Dict[str, torch.Tensor]:
    """In-place ``shadow <- decay * shadow + (1 - decay) * live``; integer buffers are copied."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    live_state = live.state_dict() if isinstance(live, nn.Module) else live
    if set(shadow) != set(live_state):
        raise KeyError("shadow and live parameter sets differ")
    floats_s, floats_l = [], []
    for name, value in live_state.items():
        target = shadow[name]
        if target.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}")
        if target.is_floating_point():
            floats_s.append(target)
            floats_l.append(value.detach())
        else:
            target.copy_(value)
    if floats_s:
        torch._foreach_mul_(floats_s, decay)
        torch._foreach_add_(floats_s, floats_l, alpha=1.0 - decay)
    return shadow


def load_shadow(module: nn.Module, shadow: Dict[str, torch.Tensor]) -> nn.Module:
    module.load_state_dict(shadow)
    return module


def parameter_names(module: nn.Module) -> List[str]:
    return [n for n, _ in module.named_parameters()]
