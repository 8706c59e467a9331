"""Versioned checkpoint container.

Layout: ``MAGIC | version u32 | payload length u64 | sha256(payload) | payload``
where the payload is a ``torch.save`` archive of plain tensors, numbers,
strings and dicts. Writes go to a temp file that is then renamed.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch

from .config import OTFMConfig, format_config
from .networks import MappingNet, PotentialNet, ema_state

CKPT_MAGIC = b"OTFMCKPT"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: OTFMConfig
    step: int
    mapping: Dict[str, torch.Tensor]
    potential: Dict[str, torch.Tensor]
    ema_mapping: Dict[str, torch.Tensor]
    ema_potential: Dict[str, torch.Tensor]
    optim_mapping: Optional[dict] = None
    optim_potential: Optional[dict] = None
    rng: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def build_mapping(self, use_ema: bool = True) -> MappingNet:
        net = MappingNet(self.config.model)
        net.load_state_dict(self.ema_mapping if use_ema else self.mapping)
        return net.eval()

    def build_potential(self, use_ema: bool = False) -> PotentialNet:
        net = PotentialNet(self.config.potential)
        net.load_state_dict(self.ema_potential if use_ema else self.potential)
        return net.eval()

    def parameter_digest(self) -> str:
        """sha256 over live and EMA tensors in a fixed order."""
        h = hashlib.sha256()
        for group in (self.mapping, self.potential, self.ema_mapping, self.ema_potential):
            for name in sorted(group):
                h.update(name.encode())
                h.update(group[name].detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_text": format_config(self.config),
            "step": int(self.step),
            "mapping": self.mapping,
            "potential": self.potential,
            "ema_mapping": self.ema_mapping,
            "ema_potential": self.ema_potential,
            "optim_mapping": self.optim_mapping,
            "optim_potential": self.optim_potential,
            "rng": self.rng,
            "extra": self.extra,
        }

    @classmethod
    def from_payload(cls, d: dict) -> "Checkpoint":
        return cls(
            config=OTFMConfig.from_dict(d["config"]),
            step=int(d["step"]),
            mapping=d["mapping"],
            potential=d["potential"],
            ema_mapping=d["ema_mapping"],
            ema_potential=d["ema_potential"],
            optim_mapping=d.get("optim_mapping"),
            optim_potential=d.get("optim_potential"),
            rng=d.get("rng", {}),
            extra=d.get("extra", {}),
        )


def init_models(cfg: OTFMConfig) -> Tuple[MappingNet, PotentialNet]:
    """Networks initialised from ``cfg.train.seed`` without touching the global RNG."""
    cfg.sync()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.train.seed)
        mapping = MappingNet(cfg.model)
        potential = PotentialNet(cfg.potential)
    return mapping, potential


def initial_checkpoint(cfg: OTFMConfig) -> Checkpoint:
    mapping, potential = init_models(cfg)
    return Checkpoint(cfg, 0, ema_state(mapping), ema_state(potential),
                      ema_state(mapping), ema_state(potential))


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Atomically write ``ckpt``; returns the payload sha256 hex digest."""
    buf = io.BytesIO()
    torch.save(ckpt.to_payload(), buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    blob = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(payload), digest) + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest.hex()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, length, digest = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: payload length {len(payload)} != declared {length}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    d = torch.load(io.BytesIO(payload), weights_only=True)
    return Checkpoint.from_payload(d)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
