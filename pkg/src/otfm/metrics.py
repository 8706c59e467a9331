"""Reduced-resolution (SAM, ERGAS, Q2n, SCC) and full-resolution (D_lambda, D_s, HQNR) quality indices.

Inputs are RasterImages or ``(bands, H, W)`` arrays; all arithmetic runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .degradation import MtfSpec, degrade_spatial, upsample_lr
from .imagery import DatasetManifest, RasterImage, SampleTriplet

PROTOCOLS = ("reduced", "full")
REDUCED_METRICS = ("SAM", "ERGAS", "Q2n", "SCC")
FULL_METRICS = ("D_lambda", "D_s", "HQNR")
ERGAS_EPS = 1e-12
DEFAULT_WINDOW = 32

LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)


def _arr(x) -> np.ndarray:
    if isinstance(x, RasterImage):
        x = x.data
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (bands, H, W), got shape {a.shape}")
    return a


def _pair(fused, ref) -> Tuple[np.ndarray, np.ndarray]:
    f, r = _arr(fused), _arr(ref)
    if f.shape[0] != r.shape[0]:
        raise ValueError(f"band mismatch: {f.shape[0]} vs {r.shape[0]}")
    if f.shape != r.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {r.shape}")
    return f, r


# ---------------------------------------------------------------------------
# reduced resolution


def sam(fused, ref) -> float:
    """Mean spectral angle in degrees; pixels where either spectrum is zero count as 0."""
    f, r = _pair(fused, ref)
    if f.shape[0] < 2:
        raise ValueError("SAM needs at least two bands")
    nf = np.sqrt((f * f).sum(0))
    nr = np.sqrt((r * r).sum(0))
    valid = (nf > 0) & (nr > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        uf = f / nf
        ur = r / nr
    # Angle between unit vectors via half-chord lengths; exact zero for identical spectra.
    diff = np.sqrt(((uf - ur) ** 2).sum(0))
    summ = np.sqrt(((uf + ur) ** 2).sum(0))
    ang = np.where(valid, 2.0 * np.arctan2(diff, summ), 0.0)
    return float(np.degrees(ang).mean())


def ergas(fused, ref, ratio: int) -> float:
    f, r = _pair(fused, ref)
    rmse = np.sqrt(((f - r) ** 2).mean(axis=(1, 2)))
    mu = np.maximum(np.abs(r.mean(axis=(1, 2))), ERGAS_EPS)
    return float(100.0 / ratio * np.sqrt(np.mean((rmse / mu) ** 2)))


def highpass(img) -> np.ndarray:
    """Laplacian response on the valid interior, shape ``(B, H-2, W-2)``."""
    a = _arr(img)
    c = a[:, 1:-1, 1:-1]
    return 4 * c - a[:, :-2, 1:-1] - a[:, 2:, 1:-1] - a[:, 1:-1, :-2] - a[:, 1:-1, 2:]


def scc_bands(fused, ref) -> Tuple[np.ndarray, np.ndarray]:
    """Per-band detail correlation and a flag for bands whose detail is constant (contribute 0)."""
    f, r = _pair(fused, ref)
    hf = highpass(f).reshape(f.shape[0], -1)
    hr = highpass(r).reshape(r.shape[0], -1)
    hf = hf - hf.mean(1, keepdims=True)
    hr = hr - hr.mean(1, keepdims=True)
    sf = np.sqrt((hf * hf).sum(1))
    sr = np.sqrt((hr * hr).sum(1))
    flagged = (sf == 0) | (sr == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (hf * hr).sum(1) / (sf * sr)
    return np.where(flagged, 0.0, corr), flagged


def scc(fused, ref) -> float:
    corr, _ = scc_bands(fused, ref)
    return float(corr.mean())


# hypercomplex arithmetic on trailing-axis component vectors (Cayley-Dickson doubling)


def hc_conj(a: np.ndarray) -> np.ndarray:
    out = -a
    out[..., 0] = a[..., 0]
    return out


def hc_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(a1, a2)(b1, b2) = (a1 b1 - conj(b2) a2, b2 a1 + a2 conj(b1))``."""
    n = a.shape[-1]
    if n == 1:
        return a * b
    h = n // 2
    a1, a2 = a[..., :h], a[..., h:]
    b1, b2 = b[..., :h], b[..., h:]
    return np.concatenate([hc_mul(a1, b1) - hc_mul(hc_conj(b2), a2),
                           hc_mul(b2, a1) + hc_mul(a2, hc_conj(b1))], axis=-1)


def _pad_pow2(a: np.ndarray) -> np.ndarray:
    b = a.shape[0]
    n = 1 << (b - 1).bit_length()
    if n == b:
        return a
    return np.concatenate([a, np.zeros((n - b,) + a.shape[1:])], axis=0)


def _windows(shape, window: int):
    H, W = shape
    if H < window or W < window:
        return [(slice(0, H), slice(0, W))]
    return [(slice(y, y + window), slice(x, x + window))
            for y in range(0, H - window + 1, window)
            for x in range(0, W - window + 1, window)]


def _q_hypercomplex(z: np.ndarray, v: np.ndarray) -> float:
    """Q index of two hypercomplex samples ``(n_pixels, n_components)``."""
    zm, vm = z.mean(0), v.mean(0)
    cross = hc_mul(z, hc_conj(v)).mean(0) - hc_mul(zm[None], hc_conj(vm)[None])[0]
    var_z = max(float((z * z).sum(1).mean() - (zm * zm).sum()), 0.0)
    var_v = max(float((v * v).sum(1).mean() - (vm * vm).sum()), 0.0)
    mz2, mv2 = float((zm * zm).sum()), float((vm * vm).sum())
    lum_den = mz2 + mv2
    con_den = var_z + var_v
    lum = 1.0 if lum_den == 0 else 2.0 * math.sqrt(mz2 * mv2) / lum_den
    if con_den == 0:
        return lum
    return float(2.0 * np.sqrt((cross * cross).sum()) / con_den * lum)


def q2n(fused, ref, window: int = DEFAULT_WINDOW) -> float:
    """Hypercomplex quality index averaged over non-overlapping ``window`` blocks.

    Bands are zero-padded to a power of two; an image smaller than the window
    is scored as a single block.
    """
    f, r = _pair(fused, ref)
    if window < 1:
        raise ValueError("window must be positive")
    f, r = _pad_pow2(f), _pad_pow2(r)
    vals = []
    for sy, sx in _windows(f.shape[1:], window):
        z = r[:, sy, sx].reshape(r.shape[0], -1).T
        v = f[:, sy, sx].reshape(f.shape[0], -1).T
        vals.append(_q_hypercomplex(z, v))
    return float(np.mean(vals))


def uiqi(x, y, window: int = DEFAULT_WINDOW) -> float:
    """Signed single-band universal image quality index averaged over blocks."""
    a, b = _pair(x, y)
    if a.shape[0] != 1:
        raise ValueError("uiqi expects single-band images")
    a, b = a[0], b[0]
    vals = []
    for sy, sx in _windows(a.shape, window):
        u, w = a[sy, sx].ravel(), b[sy, sx].ravel()
        mu, mw = u.mean(), w.mean()
        vu = max(float(((u - mu) ** 2).mean()), 0.0)
        vw = max(float(((w - mw) ** 2).mean()), 0.0)
        cov = float(((u - mu) * (w - mw)).mean())
        lum_den = mu * mu + mw * mw
        lum = 1.0 if lum_den == 0 else 2.0 * mu * mw / lum_den
        con_den = vu + vw
        vals.append(lum if con_den == 0 else 2.0 * cov / con_den * lum)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# full resolution


def _mtf_for(mtf: Optional[MtfSpec], bands: int, ratio: int) -> MtfSpec:
    return mtf if mtf is not None else MtfSpec.default(bands, ratio)


def d_lambda(fused, lrms, mtf: Optional[MtfSpec] = None, window: int = DEFAULT_WINDOW) -> float:
    """Spectral distortion ``1 - Q2n(degrade_spatial(fused), lrms)`` (scored at LR)."""
    f, m = _arr(fused), _arr(lrms)
    if f.shape[0] != m.shape[0]:
        raise ValueError(f"band mismatch: {f.shape[0]} vs {m.shape[0]}")
    ratio = f.shape[1] // m.shape[1]
    if f.shape[1] != ratio * m.shape[1] or f.shape[2] != ratio * m.shape[2]:
        raise ValueError("fused and lrms resolutions are inconsistent")
    mtf = _mtf_for(mtf, f.shape[0], ratio)
    low = degrade_spatial(f, mtf)
    return float(min(max(1.0 - q2n(low, m, window), 0.0), 1.0))


def d_s(fused, lrms, pan, mtf: Optional[MtfSpec] = None, window: int = DEFAULT_WINDOW) -> float:
    """Spatial distortion: mean over bands of ``|Q(fused_b, pan) - Q(lrms_b, pan_low)|``.

    Q is blockwise UIQI with ``window`` at HR and ``window // ratio`` at LR.
    """
    f, m, p = _arr(fused), _arr(lrms), _arr(pan)
    if p.shape[0] != 1:
        raise ValueError("pan must be single-band")
    if f.shape[0] != m.shape[0]:
        raise ValueError(f"band mismatch: {f.shape[0]} vs {m.shape[0]}")
    if f.shape[1:] != p.shape[1:]:
        raise ValueError("fused and pan must share a resolution")
    ratio = f.shape[1] // m.shape[1]
    if f.shape[1] != ratio * m.shape[1] or f.shape[2] != ratio * m.shape[2]:
        raise ValueError("fused and lrms resolutions are inconsistent")
    mtf = _mtf_for(mtf, f.shape[0], ratio)
    p_low = degrade_spatial(p, mtf, pan=True)
    lw = max(window // ratio, 1)
    diffs = [abs(uiqi(f[b:b + 1], p, window) - uiqi(m[b:b + 1], p_low, lw))
             for b in range(f.shape[0])]
    return float(min(np.mean(diffs), 1.0))


def hqnr(d_lambda_value: float, d_s_value: float) -> float:
    for name, v in (("d_lambda", d_lambda_value), ("d_s", d_s_value)):
        if not 0.0 <= v <= 1.0 or v != v:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return (1.0 - d_lambda_value) * (1.0 - d_s_value)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    protocol: str
    names: Tuple[str, ...]
    per_image: List[Dict[str, float]] = field(default_factory=list)
    image_names: List[str] = field(default_factory=list)
    aggregate: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")

    def add(self, values: Dict[str, float], name: str = "") -> None:
        self.per_image.append(dict(values))
        self.image_names.append(name)

    def finalize(self) -> "MetricReport":
        self.aggregate = {}
        for n in self.names:
            vals = np.array([d[n] for d in self.per_image], dtype=np.float64)
            self.aggregate[n] = (float(vals.mean()), float(vals.std(ddof=0)))
        return self

    def mean(self, name: str) -> float:
        return self.aggregate[name][0]

    def to_table(self) -> str:
        width = max([len("image")] + [len(n) for n in self.image_names]) + 2
        head = "image".ljust(width) + "".join(f"{n:>14}" for n in self.names)
        lines = [f"protocol: {self.protocol}", head, "-" * len(head)]
        for name, row in zip(self.image_names, self.per_image):
            lines.append(name.ljust(width) + "".join(f"{row[n]:>14.6f}" for n in self.names))
        lines.append("-" * len(head))
        lines.append("mean±std".ljust(width) + "".join(
            f"{self.aggregate[n][0]:>7.4f}±{self.aggregate[n][1]:<6.4f}" for n in self.names))
        return "\n".join(lines)

    def to_kv_lines(self) -> List[str]:
        return [f"metric={n} mean={self.aggregate[n][0]:.10g} std={self.aggregate[n][1]:.10g}"
                for n in self.names]


def reduced_metrics(fused, ref, ratio: int, window: int = DEFAULT_WINDOW) -> Dict[str, float]:
    return {"SAM": sam(fused, ref), "ERGAS": ergas(fused, ref, ratio),
            "Q2n": q2n(fused, ref, window), "SCC": scc(fused, ref)}


def full_metrics(fused, lrms, pan, mtf: Optional[MtfSpec] = None,
                 window: int = DEFAULT_WINDOW) -> Dict[str, float]:
    dl = d_lambda(fused, lrms, mtf, window)
    ds = d_s(fused, lrms, pan, mtf, window)
    return {"D_lambda": dl, "D_s": ds, "HQNR": hqnr(dl, ds)}


FusionFn = Callable[[SampleTriplet], np.ndarray]


def _bicubic_fn(t: SampleTriplet) -> np.ndarray:
    return np.clip(upsample_lr(t.lrms.data, t.ratio), 0.0, 1.0)


def _oracle_fn(t: SampleTriplet) -> np.ndarray:
    if t.hrms_ref is None:
        raise ValueError(f"{t.name or 'triplet'}: oracle fusion needs hrms_ref")
    return t.hrms_ref.data


def resolve_fusion(model, steps: int = 1) -> Tuple[FusionFn, Optional[MtfSpec]]:
    """Turn ``"oracle"``, ``"bicubic"``, a callable or a checkpoint into a fusion function."""
    if isinstance(model, str) and model in ("oracle", "bicubic"):
        return (_oracle_fn if model == "oracle" else _bicubic_fn), None
    if callable(model):
        return model, None
    import torch

    from .sampler import as_checkpoint, check_compatible, fuse_tensors

    ckpt = as_checkpoint(model)
    net = ckpt.build_mapping(use_ema=True)

    def fn(t: SampleTriplet) -> np.ndarray:
        check_compatible(ckpt, t.bands, t.ratio, t.hr_shape)
        pan = torch.from_numpy(t.pan.data)[None]
        lrms = torch.from_numpy(t.lrms.data)[None]
        return fuse_tensors(net, pan, lrms, t.ratio, steps)[0].numpy()

    return fn, ckpt.config.mtf_spec()


def evaluate(manifest: Union[DatasetManifest, Sequence[SampleTriplet]], model,
             protocol: str = "reduced", steps: int = 1, window: int = DEFAULT_WINDOW,
             mtf: Optional[MtfSpec] = None) -> MetricReport:
    """Fuse every triplet and score it under ``protocol``; aggregates use population std."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    fn, model_mtf = resolve_fusion(model, steps)
    mtf = mtf or model_mtf
    names = REDUCED_METRICS if protocol == "reduced" else FULL_METRICS
    report = MetricReport(protocol, names)
    triplets = manifest if not isinstance(manifest, DatasetManifest) else iter(manifest)
    for i, t in enumerate(triplets):
        name = t.name or f"image{i}"
        if protocol == "reduced":
            if t.hrms_ref is None:
                raise ValueError(f"{name}: reduced protocol needs hrms_ref")
            fused = fn(t)
            values = reduced_metrics(fused, t.hrms_ref.data, t.ratio, window)
            _, flagged = scc_bands(fused, t.hrms_ref.data)
            for b in np.flatnonzero(flagged):
                report.flags.append(f"{name}: band {b} has constant detail, SCC contribution 0")
        else:
            fused = fn(t)
            values = full_metrics(fused, t.lrms.data, t.pan.data, mtf, window)
        report.add(values, name)
    if not report.per_image:
        raise ValueError("nothing to evaluate")
    return report.finalize()
