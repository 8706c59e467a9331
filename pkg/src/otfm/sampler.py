"""One-step and multi-step fusion with a trained mapping network, and latency benchmarking."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .degradation import upsample_lr
from .flow import euler_sample
from .imagery import RasterImage
from .networks import MappingNet

CheckpointLike = Union[Checkpoint, str, Path]


class ArchitectureMismatchError(ValueError):
    pass


class LatencyOrderError(RuntimeError):
    pass


@dataclass
class FusionRequest:
    pan: RasterImage
    lrms: RasterImage
    steps: int = 1
    use_ema: bool = True

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if self.pan.bands != 1:
            raise ValueError("pan must have exactly one band")
        if self.pan.height % self.lrms.height or self.pan.width % self.lrms.width:
            raise ValueError("pan size is not an integer multiple of the lrms size")
        r_h = self.pan.height // self.lrms.height
        r_w = self.pan.width // self.lrms.width
        if r_h != r_w:
            raise ValueError(f"inconsistent resolution ratios {r_h} and {r_w}")

    @property
    def ratio(self) -> int:
        return self.pan.height // self.lrms.height


def as_checkpoint(checkpoint: CheckpointLike) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def _velocity(net: MappingNet):
    def fn(y, t, m_up, p):
        return net(y, t, m_up, p)
    return fn


@torch.no_grad()
def fuse_tensors(net: MappingNet, pan: torch.Tensor, lrms: torch.Tensor, ratio: int,
                 steps: int = 1) -> torch.Tensor:
    """Batched fusion ``(N,1,H,W), (N,B,h,w) -> (N,B,H,W)`` clipped to [0, 1]."""
    y0 = upsample_lr(lrms, ratio)
    out = euler_sample(_velocity(net), y0, (y0, pan), steps)
    return out.clamp_(0.0, 1.0)


def check_compatible(ckpt: Checkpoint, bands: int, ratio: int, hr_shape) -> None:
    cfg = ckpt.config
    if cfg.data.bands != bands:
        raise ArchitectureMismatchError(
            f"checkpoint expects {cfg.data.bands} bands, input has {bands}")
    if cfg.data.ratio != ratio:
        raise ArchitectureMismatchError(
            f"checkpoint trained at ratio {cfg.data.ratio}, input has ratio {ratio}")
    k = cfg.model.size_multiple
    if hr_shape[0] % k or hr_shape[1] % k:
        raise ValueError(f"HR size {hr_shape[0]}x{hr_shape[1]} not divisible by {k}")


def fuse(req: FusionRequest, checkpoint: CheckpointLike) -> RasterImage:
    ckpt = as_checkpoint(checkpoint)
    check_compatible(ckpt, req.lrms.bands, req.ratio, (req.pan.height, req.pan.width))
    net = ckpt.build_mapping(use_ema=req.use_ema)
    pan = torch.from_numpy(req.pan.data)[None]
    lrms = torch.from_numpy(req.lrms.data)[None]
    out = fuse_tensors(net, pan, lrms, req.ratio, req.steps)
    return RasterImage(out[0].numpy(), req.lrms.sensor_tag)


@dataclass
class LatencyRow:
    steps: int
    seconds: float
    cv: float
    samples: List[float]


@dataclass
class LatencyTable:
    rows: List[LatencyRow]
    hr_size: int

    def seconds(self, steps: int) -> float:
        for r in self.rows:
            if r.steps == steps:
                return r.seconds
        raise KeyError(steps)

    def is_monotone(self) -> bool:
        ordered = sorted(self.rows, key=lambda r: r.steps)
        return all(a.seconds <= b.seconds for a, b in zip(ordered, ordered[1:]))

    def format(self) -> str:
        lines = [f"{'steps':>6} {'median_s':>12} {'cv':>8}"]
        for r in self.rows:
            lines.append(f"{r.steps:>6d} {r.seconds:>12.6f} {r.cv:>8.4f}")
        return "\n".join(lines)


def bench_latency(checkpoint: CheckpointLike, hr_size: int, steps_list: Sequence[int],
                  repeats: int = 3, warmup: int = 1, seed: int = 0,
                  check_monotone: bool = True) -> LatencyTable:
    """Median wall time of the full fusion pipeline per step count on a fixed random input."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    steps_list = [int(s) for s in steps_list]
    if not steps_list or any(s < 1 for s in steps_list):
        raise ValueError("steps must be positive integers")
    ckpt = as_checkpoint(checkpoint)
    cfg = ckpt.config
    r = cfg.data.ratio
    if hr_size % r:
        raise ValueError(f"hr_size {hr_size} not divisible by ratio {r}")
    check_compatible(ckpt, cfg.data.bands, r, (hr_size, hr_size))
    net = ckpt.build_mapping(use_ema=True)
    rng = np.random.default_rng(seed)
    pan = torch.from_numpy(rng.random((1, 1, hr_size, hr_size), dtype=np.float32))
    lrms = torch.from_numpy(rng.random((1, cfg.data.bands, hr_size // r, hr_size // r),
                                       dtype=np.float32))
    rows = []
    for steps in steps_list:
        for _ in range(warmup):
            fuse_tensors(net, pan, lrms, r, steps)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fuse_tensors(net, pan, lrms, r, steps)
            samples.append(time.perf_counter() - t0)
        med = statistics.median(samples)
        mean = statistics.fmean(samples)
        cv = statistics.pstdev(samples) / mean if mean > 0 else 0.0
        rows.append(LatencyRow(steps, med, cv, samples))
    table = LatencyTable(rows, hr_size)
    if check_monotone and not table.is_monotone():
        raise LatencyOrderError("latency is not monotone in steps:\n" + table.format())
    return table
