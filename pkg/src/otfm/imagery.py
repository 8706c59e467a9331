"""Raster data model, the OTFM container format, manifests and synthetic scenes."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

MAGIC = b"OTFM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBBHII")
_DTYPES = {8: np.dtype("<u1"), 16: np.dtype("<u2"), 32: np.dtype("<f4")}

MANIFEST_TAG = "#otfm-manifest"
SPLITS = ("train", "val", "test")


class RasterFormatError(ValueError):
    """Header of a raster or manifest file cannot be parsed."""


class RasterCorruptionError(RasterFormatError):
    """Payload size disagrees with the declared header."""


@dataclass
class RasterImage:
    """Band-sequential float image, shape ``(bands, height, width)``."""

    data: np.ndarray
    sensor_tag: Optional[str] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"raster data must be (bands, height, width), got {data.shape}")
        self.data = data

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check(self, unit_range: bool = True) -> "RasterImage":
        if not self.is_finite():
            raise ValueError("raster contains non-finite values")
        if unit_range and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("raster values outside [0, 1]")
        return self


@dataclass
class SampleTriplet:
    """Aligned PAN / LRMS / optional HRMS reference at ratio ``r``."""

    pan: RasterImage
    lrms: RasterImage
    hrms_ref: Optional[RasterImage] = None
    ratio: int = 4
    name: str = ""

    def __post_init__(self):
        if self.pan.bands != 1:
            raise ValueError(f"pan must have one band, got {self.pan.bands}")
        r = int(self.ratio)
        if r < 1:
            raise ValueError("ratio must be positive")
        H, W = self.pan.height, self.pan.width
        if (H, W) != (r * self.lrms.height, r * self.lrms.width):
            raise ValueError(
                f"pan {H}x{W} is not ratio {r} times lrms {self.lrms.height}x{self.lrms.width}"
            )
        if self.hrms_ref is not None:
            if self.hrms_ref.bands != self.lrms.bands:
                raise ValueError("hrms_ref and lrms band counts differ")
            if (self.hrms_ref.height, self.hrms_ref.width) != (H, W):
                raise ValueError("hrms_ref must match pan resolution")

    @property
    def bands(self) -> int:
        return self.lrms.bands

    @property
    def hr_shape(self):
        return self.pan.height, self.pan.width


# ---------------------------------------------------------------------------
# container


def save_raster(img: RasterImage, path, bit_depth: int = 32) -> None:
    if bit_depth not in _DTYPES:
        raise ValueError(f"bit depth must be one of {sorted(_DTYPES)}")
    img.check(unit_range=bit_depth != 32)
    if bit_depth == 32:
        payload = img.data.astype(_DTYPES[32])
    else:
        scale = float(2**bit_depth - 1)
        payload = np.round(img.data.astype(np.float64) * scale).astype(_DTYPES[bit_depth])
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, bit_depth, img.bands, img.height, img.width)
    _atomic_write(Path(path), header + payload.tobytes(order="C"))


def load_raster(path, sensor_tag: Optional[str] = None) -> RasterImage:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, version, bit_depth, bands, height, width = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    if bit_depth not in _DTYPES:
        raise RasterFormatError(f"{path}: unsupported bit depth {bit_depth}")
    if min(bands, height, width) < 1:
        raise RasterFormatError(f"{path}: empty dimensions")
    dtype = _DTYPES[bit_depth]
    expected = bands * height * width * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise RasterCorruptionError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(bands, height, width)
    if bit_depth == 32:
        data = data.astype(np.float32)
        if not np.isfinite(data).all():
            raise RasterCorruptionError(f"{path}: non-finite payload")
    else:
        data = (data.astype(np.float64) / float(2**bit_depth - 1)).astype(np.float32)
    return RasterImage(data, sensor_tag=sensor_tag)


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# triplets on disk and manifests

TRIPLET_FILES = {"pan": "pan.otfm", "lrms": "lrms.otfm", "hrms_ref": "hrms.otfm"}


def save_triplet(triplet: SampleTriplet, directory, bit_depth: int = 32) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_raster(triplet.pan, directory / TRIPLET_FILES["pan"], bit_depth)
    save_raster(triplet.lrms, directory / TRIPLET_FILES["lrms"], bit_depth)
    if triplet.hrms_ref is not None:
        save_raster(triplet.hrms_ref, directory / TRIPLET_FILES["hrms_ref"], bit_depth)


def load_triplet(directory, ratio: int) -> SampleTriplet:
    directory = Path(directory)
    pan = load_raster(directory / TRIPLET_FILES["pan"])
    lrms = load_raster(directory / TRIPLET_FILES["lrms"])
    ref_path = directory / TRIPLET_FILES["hrms_ref"]
    hrms = load_raster(ref_path) if ref_path.exists() else None
    return SampleTriplet(pan, lrms, hrms, ratio=ratio, name=directory.name)


@dataclass
class DatasetManifest:
    """Ordered triplet directories (relative to ``root``) sharing ratio and bands."""

    entries: List[str]
    ratio: int
    bands: int
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def paths(self) -> List[Path]:
        return [self.root / e for e in self.entries]

    def load(self, index: int) -> SampleTriplet:
        t = load_triplet(self.root / self.entries[index], self.ratio)
        if t.bands != self.bands:
            raise RasterFormatError(
                f"{self.entries[index]}: {t.bands} bands, manifest declares {self.bands}"
            )
        return t

    def __iter__(self) -> Iterator[SampleTriplet]:
        for i in range(len(self.entries)):
            yield self.load(i)

    def validate(self) -> None:
        for i in range(len(self.entries)):
            self.load(i)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"{MANIFEST_TAG} v1 ratio={manifest.ratio} bands={manifest.bands} split={manifest.split}"]
    lines += list(manifest.entries)
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MANIFEST_TAG):
        raise RasterFormatError(f"{path}: missing manifest header")
    tokens = lines[0].split()
    if len(tokens) < 2 or tokens[1] != "v1":
        raise RasterFormatError(f"{path}: unsupported manifest version")
    fields = dict(tok.split("=", 1) for tok in tokens[2:] if "=" in tok)
    try:
        ratio, bands = int(fields["ratio"]), int(fields["bands"])
    except (KeyError, ValueError) as exc:
        raise RasterFormatError(f"{path}: header needs integer ratio= and bands=") from exc
    entries = [ln.strip() for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    return DatasetManifest(entries, ratio, bands, fields.get("split", "train"), root=path.parent)


# ---------------------------------------------------------------------------
# patches


def patch_offsets(size: int, patch: int, stride: int) -> List[int]:
    return list(range(0, size - patch + 1, stride))


def extract_patches(triplet: SampleTriplet, patch_hr: int, stride_hr: int) -> List[SampleTriplet]:
    r = triplet.ratio
    if patch_hr <= 0 or stride_hr <= 0:
        raise ValueError("patch and stride must be positive")
    if patch_hr % r or stride_hr % r:
        raise ValueError(f"patch ({patch_hr}) and stride ({stride_hr}) must be divisible by ratio {r}")
    H, W = triplet.hr_shape
    if patch_hr > min(H, W):
        raise ValueError(f"patch {patch_hr} larger than image {H}x{W}")
    pl = patch_hr // r
    out = []
    for i in patch_offsets(H, patch_hr, stride_hr):
        for j in patch_offsets(W, patch_hr, stride_hr):
            li, lj = i // r, j // r

            def crop(img, a, b, n):
                return RasterImage(img.data[:, a:a + n, b:b + n], img.sensor_tag)

            out.append(
                SampleTriplet(
                    crop(triplet.pan, i, j, patch_hr),
                    crop(triplet.lrms, li, lj, pl),
                    None if triplet.hrms_ref is None else crop(triplet.hrms_ref, i, j, patch_hr),
                    ratio=r,
                    name=f"{triplet.name}@{i},{j}",
                )
            )
    return out


# ---------------------------------------------------------------------------
# synthetic scenes

PAN_NOISE_AMPLITUDE = 0.01


def _blob_field(rng: np.random.Generator, size: int, count: int, sigma_range) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(-0.1 * size, 1.1 * size, 2)
        sy, sx = rng.uniform(*sigma_range, 2)
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    return out


def synth_scene(seed: int, bands: int = 4, hr_size: int = 64, ratio: int = 4,
                mtf=None) -> SampleTriplet:
    """Deterministic Gaussian-blob scene; lrms is ``degrade_spatial`` of the reference."""
    from .degradation import MtfSpec, degrade_spatial

    if bands < 1:
        raise ValueError("bands must be >= 1")
    if ratio < 2:
        raise ValueError("ratio must be >= 2")
    if hr_size % ratio:
        raise ValueError(f"hr_size {hr_size} not divisible by ratio {ratio}")
    rng = np.random.default_rng(seed)
    n_materials = 3
    signatures = rng.uniform(0.15, 1.0, size=(n_materials, bands))
    scale = hr_size / 64.0
    abundance = []
    for _ in range(n_materials):
        coarse = _blob_field(rng, hr_size, 3, (8 * scale, 20 * scale))
        fine = _blob_field(rng, hr_size, int(14 * scale * scale) + 4, (0.8, 3.0))
        abundance.append(0.6 * coarse / max(coarse.max(), 1e-6) + fine)
    abundance = np.stack(abundance)
    hrms = np.einsum("khw,kb->bhw", abundance, signatures)
    for b in range(bands):
        hrms[b] += 0.15 * _blob_field(rng, hr_size, 4, (1.0, 6.0))
    hrms = np.clip(0.05 + 0.85 * hrms / np.percentile(hrms, 99), 0.0, 1.0).astype(np.float32)
    noise = rng.uniform(-PAN_NOISE_AMPLITUDE, PAN_NOISE_AMPLITUDE, size=(1, hr_size, hr_size))
    pan = np.clip(hrms.astype(np.float64).mean(axis=0, keepdims=True) + noise, 0.0, 1.0)

    hr = RasterImage(hrms)
    mtf = mtf if mtf is not None else MtfSpec.default(bands, ratio)
    lrms = degrade_spatial(hr, mtf)
    return SampleTriplet(RasterImage(pan), lrms, hr, ratio=ratio, name=f"synth{seed}")


def synth_dataset(seed: int, count: int, bands: int, hr_size: int, ratio: int) -> List[SampleTriplet]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synth_scene(int(s), bands, hr_size, ratio) for s in seeds]


def stack_triplets(triplets: Sequence[SampleTriplet]):
    """Stack into float32 arrays ``(pan, lrms, hrms_or_None)`` with a leading batch axis."""
    pan = np.stack([t.pan.data for t in triplets])
    lrms = np.stack([t.lrms.data for t in triplets])
    if all(t.hrms_ref is not None for t in triplets):
        hrms = np.stack([t.hrms_ref.data for t in triplets])
    else:
        hrms = None
    return pan, lrms, hrms
