"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .imagery import RasterImage, SampleTriplet


def check_triplets(X, require_reference: bool = False, bands: int = None,
                   ratio: int = None) -> List[SampleTriplet]:
    if isinstance(X, SampleTriplet):
        X = [X]
    triplets = list(X)
    if not triplets:
        raise ValueError("expected at least one SampleTriplet")
    for i, t in enumerate(triplets):
        if not isinstance(t, SampleTriplet):
            raise TypeError(f"item {i} is {type(t).__name__}, expected SampleTriplet")
        if require_reference and t.hrms_ref is None:
            raise ValueError(f"item {i} has no hrms_ref")
        if bands is not None and t.bands != bands:
            raise ValueError(f"item {i} has {t.bands} bands, expected {bands}")
        if ratio is not None and t.ratio != ratio:
            raise ValueError(f"item {i} has ratio {t.ratio}, expected {ratio}")
    return triplets


def check_pan_lrms(pan, lrms, ratio: int) -> Tuple[np.ndarray, np.ndarray]:
    """Validate batched ``(N,1,H,W)`` / ``(N,B,h,w)`` arrays (leading axis optional)."""
    pan = np.asarray(pan.data if isinstance(pan, RasterImage) else pan, dtype=np.float32)
    lrms = np.asarray(lrms.data if isinstance(lrms, RasterImage) else lrms, dtype=np.float32)
    if pan.ndim == 3:
        pan = pan[None]
    if lrms.ndim == 3:
        lrms = lrms[None]
    if pan.ndim != 4 or lrms.ndim != 4:
        raise ValueError("pan and lrms must be (N, bands, H, W) or (bands, H, W)")
    if pan.shape[0] != lrms.shape[0]:
        raise ValueError("pan and lrms batch sizes differ")
    if pan.shape[1] != 1:
        raise ValueError("pan must have exactly one band")
    if pan.shape[2] != ratio * lrms.shape[2] or pan.shape[3] != ratio * lrms.shape[3]:
        raise ValueError(f"pan {pan.shape[2:]} is not {ratio}x lrms {lrms.shape[2:]}")
    if not (np.isfinite(pan).all() and np.isfinite(lrms).all()):
        raise ValueError("inputs contain non-finite values")
    return pan, lrms


def to_triplets(pan, lrms, ratio: int, hrms=None) -> List[SampleTriplet]:
    pan, lrms = check_pan_lrms(pan, lrms, ratio)
    refs: Sequence = [None] * pan.shape[0] if hrms is None else np.asarray(hrms, dtype=np.float32)
    return [SampleTriplet(RasterImage(p), RasterImage(m), None if h is None else RasterImage(h),
                          ratio=ratio)
            for p, m, h in zip(pan, lrms, refs)]
