"""Spatial/spectral degradation operators: MTF blur, decimation, spectral matching.

Every operator accepts a :class:`RasterImage`, a numpy array or a torch tensor
laid out as ``(..., bands, height, width)`` and returns the same kind. The
arithmetic always runs in float64 and is cast back to the input dtype, so a
float32 training tensor and a float32 raster produce bit-identical results.
Convolutions are written as explicit tap sums, which keeps them independent
of batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import brentq

from .imagery import RasterImage

DEFAULT_MS_GAIN = 0.29
DEFAULT_PAN_GAIN = 0.15
DIVISION_EPS = 1e-4


@dataclass(frozen=True)
class MtfSpec:
    nyquist_gain_per_band: Tuple[float, ...]
    pan_gain: float = DEFAULT_PAN_GAIN
    kernel_size: int = 41
    ratio: int = 4

    def __post_init__(self):
        gains = tuple(float(g) for g in self.nyquist_gain_per_band)
        object.__setattr__(self, "nyquist_gain_per_band", gains)
        if not gains:
            raise ValueError("need one MTF gain per band")
        for g in gains + (self.pan_gain,):
            if not 0.0 < g < 1.0:
                raise ValueError(f"MTF gain {g} outside (0, 1)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.ratio < 1:
            raise ValueError("ratio must be positive")

    @classmethod
    def default(cls, bands: int, ratio: int = 4, kernel_size: Optional[int] = None) -> "MtfSpec":
        return cls((DEFAULT_MS_GAIN,) * bands, DEFAULT_PAN_GAIN,
                   kernel_size or 10 * ratio + 1, ratio)

    @property
    def bands(self) -> int:
        return len(self.nyquist_gain_per_band)


@dataclass
class SpectralMatchWeights:
    weights: np.ndarray
    bias: float
    rank_deficient: bool = False
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# dispatch between rasters, arrays and tensors


def _to_tensor(x):
    if isinstance(x, RasterImage):
        t = torch.from_numpy(x.data.astype(np.float64))

        def back(out):
            return RasterImage(out.detach().numpy().astype(np.float32), x.sensor_tag)

        return t, back
    if isinstance(x, torch.Tensor):
        dtype = x.dtype

        def back(out):
            return out.to(dtype)

        return x.to(torch.float64), back
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64

    def back(out):
        return out.detach().numpy().astype(dtype)

    return torch.from_numpy(arr.astype(np.float64)), back


def _plain(x):
    if isinstance(x, RasterImage):
        return torch.from_numpy(x.data.astype(np.float64))
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# kernels


def _gaussian_taps(sigma: float, size: int) -> np.ndarray:
    n = np.arange(size) - size // 2
    taps = np.exp(-0.5 * (n / sigma) ** 2)
    return taps / taps.sum()


def _response(taps: np.ndarray, freq: float) -> float:
    n = np.arange(taps.size) - taps.size // 2
    return float(np.sum(taps * np.cos(2 * np.pi * freq * n)))


@lru_cache(maxsize=256)
def _taps_for_gain(gain: float, ratio: int, size: int) -> Tuple[float, ...]:
    if not 0.0 < gain < 1.0:
        raise ValueError(f"MTF gain {gain} outside (0, 1)")
    if ratio < 1 or size < 1 or size % 2 == 0:
        raise ValueError("ratio must be positive and size odd")
    freq = 1.0 / (2 * ratio)
    sigma0 = ratio * math.sqrt(-2.0 * math.log(gain)) / math.pi

    def gap(sigma):
        return _response(_gaussian_taps(sigma, size), freq) - gain

    lo, hi = 1e-3, max(4 * sigma0, 1.0)
    if gap(lo) < 0 or gap(hi) > 0:
        raise ValueError(f"kernel size {size} cannot reach Nyquist gain {gain} at ratio {ratio}")
    sigma = brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14)
    return tuple(_gaussian_taps(sigma, size))


def mtf_kernel_1d(gain: float, ratio: int, size: int) -> np.ndarray:
    return np.array(_taps_for_gain(float(gain), int(ratio), int(size)))


def mtf_kernel(gain: float, ratio: int, size: int) -> np.ndarray:
    """Isotropic Gaussian whose response at ``1/(2*ratio)`` cycles/pixel equals ``gain``."""
    k = mtf_kernel_1d(gain, ratio, size)
    return np.outer(k, k)


# ---------------------------------------------------------------------------
# blur / decimation


def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    idx = np.arange(-pad, n + pad) % (2 * n)
    idx = np.where(idx >= n, 2 * n - 1 - idx, idx)
    return torch.from_numpy(idx.astype(np.int64))


def _filter_axis(x: torch.Tensor, taps: torch.Tensor, axis: int,
                 stride: int = 1, offset: int = 0) -> torch.Tensor:
    # taps: (bands, K), broadcast against x's band axis (-3). Only every
    # ``stride``-th output from ``offset`` is evaluated; each one uses the same
    # tap order as the dense filter, so subsampling commutes bit-exactly.
    size = taps.shape[-1]
    pad = size // 2
    n = x.shape[axis]
    n_out = len(range(offset, n, stride))
    xp = x.index_select(axis, _symmetric_index(n, pad))
    axis = axis % x.dim()
    sl = [slice(None)] * x.dim()
    out = None
    for k in range(size):
        w = taps[:, k].reshape(-1, 1, 1)
        sl[axis] = slice(offset + k, offset + k + stride * (n_out - 1) + 1, stride)
        term = w * xp[tuple(sl)]
        out = term if out is None else out + term
    return out


def _gain_taps(mtf: MtfSpec, bands: int, pan: bool) -> torch.Tensor:
    if pan:
        gains = (mtf.pan_gain,) * bands
    else:
        if bands != mtf.bands:
            raise ValueError(f"image has {bands} bands but MTF gains list {mtf.bands} entries")
        gains = mtf.nyquist_gain_per_band
    rows = [mtf_kernel_1d(g, mtf.ratio, mtf.kernel_size) for g in gains]
    return torch.from_numpy(np.stack(rows))


def _blur(t: torch.Tensor, mtf: MtfSpec, pan: bool) -> torch.Tensor:
    taps = _gain_taps(mtf, t.shape[-3], pan)
    return _filter_axis(_filter_axis(t, taps, -2), taps, -1)


def blur(img, mtf: MtfSpec, pan: bool = False):
    """Per-band MTF blur with symmetric boundaries; ``pan=True`` uses the PAN gain."""
    t, back = _to_tensor(img)
    return back(_blur(t, mtf, pan))


def _check_divisible(t: torch.Tensor, ratio: int) -> None:
    H, W = t.shape[-2:]
    if ratio < 1 or H % ratio or W % ratio:
        raise ValueError(f"{H}x{W} not divisible by ratio {ratio}")


def _decimate(t: torch.Tensor, ratio: int) -> torch.Tensor:
    _check_divisible(t, ratio)
    o = ratio // 2
    return t[..., o::ratio, o::ratio]


def _blur_decimate(t: torch.Tensor, mtf: MtfSpec, pan: bool) -> torch.Tensor:
    """``_decimate(_blur(t))`` evaluating the filter only on the kept grid."""
    _check_divisible(t, mtf.ratio)
    taps = _gain_taps(mtf, t.shape[-3], pan)
    r, o = mtf.ratio, mtf.ratio // 2
    return _filter_axis(_filter_axis(t, taps, -2, r, o), taps, -1, r, o)


def decimate(img, ratio: int):
    t, back = _to_tensor(img)
    return back(_decimate(t, ratio))


def degrade_spatial(y, mtf: MtfSpec, pan: bool = False):
    """Observation model ``y B S``: MTF blur followed by decimation."""
    t, back = _to_tensor(y)
    return back(_blur_decimate(t, mtf, pan))


# ---------------------------------------------------------------------------
# bicubic interpolation

_CUBIC_A = -0.5


def _cubic(d: np.ndarray) -> np.ndarray:
    d = np.abs(d)
    a = _CUBIC_A
    near = (a + 2) * d**3 - (a + 3) * d**2 + 1
    far = a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _as_fraction(factor) -> Fraction:
    f = Fraction(factor).limit_denominator(10_000) if not isinstance(factor, Fraction) else factor
    if f <= 0:
        raise ValueError("resize factor must be positive")
    return f


@lru_cache(maxsize=256)
def _cubic_plan(n_in: int, n_out: int, factor: Fraction, offset: float):
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst - offset) / float(factor)
    base = np.floor(src)
    frac = src - base
    idx = base[:, None].astype(np.int64) + np.arange(-1, 3)[None, :]
    weights = _cubic(frac[:, None] - np.arange(-1, 3)[None, :])
    return np.clip(idx, 0, n_in - 1), weights


def _resize_axis(x: torch.Tensor, factor: Fraction, axis: int, offset: float) -> torch.Tensor:
    n_in = x.shape[axis]
    n_out = n_in * factor
    if n_out.denominator != 1:
        raise ValueError(f"factor {factor} gives non-integer size from {n_in}")
    idx, weights = _cubic_plan(n_in, int(n_out), factor, float(offset))
    shape = [1] * x.dim()
    shape[axis] = int(n_out)
    out = None
    for k in range(4):
        w = torch.from_numpy(weights[:, k].copy()).reshape(shape)
        term = w * x.index_select(axis, torch.from_numpy(idx[:, k].copy()))
        out = term if out is None else out + term
    return out


def bicubic_resize(img, factor, offset: Optional[float] = None):
    """Separable Catmull-Rom resize with edge clamping.

    Output pixel ``j`` samples input coordinate ``(j - offset) / factor``; the
    default offset ``(factor - 1) / 2`` is the pixel-centre convention.
    """
    f = _as_fraction(factor)
    if offset is None:
        offset = (float(f) - 1.0) / 2.0
    t, back = _to_tensor(img)
    return back(_resize_axis(_resize_axis(t, f, -2, offset), f, -1, offset))


def upsample_lr(img, ratio: int):
    """Bicubic upsampling aligned with :func:`decimate`'s sampling grid."""
    return bicubic_resize(img, ratio, offset=ratio // 2)


# ---------------------------------------------------------------------------
# spectral matching


def fit_band_weights(pan, lrms_up) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched least squares ``pan ~ sum_b w_b lrms_b + bias``.

    Inputs are ``(N, 1, H, W)`` and ``(N, B, H, W)``; returns float64 weights
    ``(N, B)``, bias ``(N,)`` and the design rank per sample. Rank-deficient
    designs get the minimum-norm solution.
    """
    p = _plain(pan).detach()
    m = _plain(lrms_up).detach()
    if p.dim() == 3:
        p, m = p[None], m[None]
    N, B = m.shape[:2]
    if p.shape[1] != 1 or p.shape[-2:] != m.shape[-2:]:
        raise ValueError("pan must be single band at the resolution of lrms_up")
    design = torch.cat([m.reshape(N, B, -1), torch.ones(N, 1, m[0, 0].numel(), dtype=m.dtype)], 1)
    design = design.transpose(1, 2)
    target = p.reshape(N, -1, 1)
    sol = torch.linalg.lstsq(design, target, driver="gelsd")
    coef = sol.solution[..., 0]
    return coef[:, :B], coef[:, B], sol.rank


def band_combination(y, weights: torch.Tensor, bias: torch.Tensor):
    """``sum_b w_b y_b + bias`` for batched ``y`` of shape ``(N, B, H, W)``."""
    t, back = _to_tensor(y)
    w = weights.to(torch.float64)
    out = (w[:, :, None, None] * t).sum(1, keepdim=True) + bias.to(torch.float64)[:, None, None, None]
    return back(out)


def spectral_match(pan, lrms_up):
    """Least-squares band combination of ``lrms_up`` matched to ``pan``.

    Returns ``(SpectralMatchWeights, p_hat)`` where ``p_hat`` is the fitted
    combination re-standardised to the mean and std of ``pan``.
    """
    p_t, back = _to_tensor(pan)
    m_t = _plain(lrms_up)
    if p_t.dim() != 3 or m_t.dim() != 3:
        raise ValueError("spectral_match works on single (bands, H, W) images")
    w, b, rank = fit_band_weights(p_t[None], m_t[None])
    fitted = (w[0][:, None, None] * m_t).sum(0, keepdim=True) + b[0]
    f_std = fitted.std(unbiased=False)
    if f_std > 0:
        p_hat = (fitted - fitted.mean()) / f_std * p_t.std(unbiased=False) + p_t.mean()
    else:
        p_hat = torch.full_like(fitted, float(p_t.mean()))
    residual = float(((p_t - fitted) ** 2).mean())
    info = SpectralMatchWeights(
        weights=w[0].numpy().copy(),
        bias=float(b[0]),
        rank_deficient=int(rank[0]) < m_t.shape[0] + 1,
        meta={"residual": residual, "rank": int(rank[0])},
    )
    return info, back(p_hat)


def pan_lowpass(p_hat, mtf: MtfSpec):
    """PAN-gain MTF blur, decimation and aligned bicubic upsampling back to full size."""
    t, back = _to_tensor(p_hat)
    low = _blur_decimate(t, mtf, pan=True)
    r = mtf.ratio
    up = _resize_axis(_resize_axis(low, Fraction(r), -2, r // 2), Fraction(r), -1, r // 2)
    return back(up)


def degrade_spectral(y, p_hat, p_low, mtf: MtfSpec, eps: float = DIVISION_EPS):
    """Detail-ratio estimate ``y - blur(y) * (p_hat / max(p_low, eps))`` at full resolution."""
    t, back = _to_tensor(y)
    ph = _plain(p_hat)
    pl = _plain(p_low)
    return back(t - _blur(t, mtf, pan=False) * (ph / torch.clamp(pl, min=eps)))


def laplacian_energy(img) -> float:
    """Energy of the 4-neighbour Laplacian response on the image interior."""
    t = _plain(img)
    lap = (4 * t[..., 1:-1, 1:-1] - t[..., :-2, 1:-1] - t[..., 2:, 1:-1]
           - t[..., 1:-1, :-2] - t[..., 1:-1, 2:])
    return float((lap**2).mean())


def gains_from_sequence(values: Sequence[float], bands: int) -> Tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if len(values) == 1:
        return values * bands
    if len(values) != bands:
        raise ValueError(f"expected 1 or {bands} MTF gains, got {len(values)}")
    return values
