"""Run configuration: dataclasses per module and a flat ``key = value`` file format.

File layout::

    # comment
    [train]
    max_steps = 2000
    lr_mapping = 2e-4

    [mtf.QB]            # per-sensor MTF table, selected by data.sensor
    ms_gains = 0.34, 0.32, 0.30, 0.22
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, get_type_hints

from .degradation import DEFAULT_MS_GAIN, DEFAULT_PAN_GAIN, MtfSpec, gains_from_sequence
from .losses import CostConfig
from .networks import MappingNetConfig, PotentialNetConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class TrainConfig:
    lr_mapping: float = 2e-4
    lr_potential: float = 1e-4
    max_steps: int = 100_000
    batch_size: int = 52
    ema_decay: float = 0.99
    seed: int = 0
    weight_flow: float = 1.0
    weight_mapping: float = 1.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    uot: bool = True
    checkpoint_every: int = 1000
    log_every: int = 50
    max_failed_steps: int = 10
    patch_hr: int = 0
    stride_hr: int = 0

    def __post_init__(self):
        if self.lr_mapping <= 0 or self.lr_potential < 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class DataConfig:
    bands: int = 4
    ratio: int = 4
    sensor: str = ""


@dataclass
class MtfConfig:
    ms_gains: Tuple[float, ...] = (DEFAULT_MS_GAIN,)
    pan_gain: float = DEFAULT_PAN_GAIN
    kernel_size: int = 0  # 0 -> 10 * ratio + 1


@dataclass
class OTFMConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: MappingNetConfig = field(default_factory=MappingNetConfig)
    potential: PotentialNetConfig = field(default_factory=PotentialNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    mtf: MtfConfig = field(default_factory=MtfConfig)
    sensors: Dict[str, MtfConfig] = field(default_factory=dict)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "OTFMConfig":
        """Propagate the band count into the network configs."""
        self.model.bands = self.data.bands
        self.potential.bands = self.data.bands
        return self

    def mtf_spec(self, sensor: Optional[str] = None) -> MtfSpec:
        sensor = sensor if sensor is not None else self.data.sensor
        mc = self.sensors.get(sensor, self.mtf) if sensor else self.mtf
        r = self.data.ratio
        return MtfSpec(gains_from_sequence(mc.ms_gains, self.data.bands), mc.pan_gain,
                       mc.kernel_size or 10 * r + 1, r)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OTFMConfig":
        sensors = {k: _build(MtfConfig, v) for k, v in d.get("sensors", {}).items()}
        return cls(
            data=_build(DataConfig, d.get("data", {})),
            model=_build(MappingNetConfig, d.get("model", {})),
            potential=_build(PotentialNetConfig, d.get("potential", {})),
            train=_build(TrainConfig, d.get("train", {})),
            cost=_build(CostConfig, d.get("cost", {})),
            mtf=_build(MtfConfig, d.get("mtf", {})),
            sensors=sensors,
        )


def desk_config(**train_overrides) -> OTFMConfig:
    """Small CPU configuration used by the tests and the desk-scale experiments.

    Learning rates keep the 2:1 mapping/potential ratio of the library defaults,
    scaled up for a 2,000-step run. With mean-reduced norms the cost is about
    1e-3 per sample, so the cost weights are raised and the mapping-loss weight
    lowered to keep the potential's gradient a small fraction of the flow gradient.
    """
    cfg = OTFMConfig(
        data=DataConfig(bands=4, ratio=4),
        model=MappingNetConfig(bands=4, base_channels=16, levels=2, attention_window=3),
        potential=PotentialNetConfig(bands=4, channels=32),
        train=TrainConfig(batch_size=8, max_steps=2000, checkpoint_every=500, log_every=50,
                          lr_mapping=1e-3, lr_potential=5e-4, weight_mapping=0.01),
        cost=CostConfig(lambda_base=10.0, lambda_spatial=10.0, lambda_spectral=10.0),
    )
    for k, v in train_overrides.items():
        setattr(cfg.train, k, v)
    cfg.train.__post_init__()
    return cfg


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    hints = get_type_hints(cls)
    for k, v in values.items():
        kwargs[k] = _coerce(v, hints[k]) if not isinstance(v, str) else _parse_value(v, hints[k])
    return cls(**kwargs)


def _coerce(value, hint):
    if hint in (Tuple[float, ...],) or getattr(hint, "__origin__", None) is tuple:
        return tuple(float(x) for x in value)
    return value


def _parse_value(text: str, hint):
    text = text.strip()
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if getattr(hint, "__origin__", None) is tuple:
        return tuple(float(x) for x in text.split(",") if x.strip())
    raise ValueError(f"unsupported field type {hint}")


SECTION_TYPES = {
    "data": DataConfig,
    "model": MappingNetConfig,
    "potential": PotentialNetConfig,
    "train": TrainConfig,
    "cost": CostConfig,
    "mtf": MtfConfig,
}


def parse_config_text(text: str, source: str = "<config>") -> OTFMConfig:
    sections: Dict[str, Dict[str, Tuple[str, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, source)
            current = line[1:-1].strip()
            base = current.split(".", 1)[0]
            if base not in SECTION_TYPES or (base != "mtf" and "." in current):
                raise ConfigError(f"unknown section [{current}]", lineno, source)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if current is None:
            raise ConfigError("key outside of any section", lineno, source)
        key, value = (s.strip() for s in line.split("=", 1))
        sections[current][key] = (value, lineno)

    built = {}
    sensors = {}
    for name, entries in sections.items():
        cls = SECTION_TYPES[name.split(".", 1)[0]]
        hints = get_type_hints(cls)
        kwargs = {}
        for key, (value, lineno) in entries.items():
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]", lineno, source)
            try:
                kwargs[key] = _parse_value(value, hints[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", lineno, source) from None
        try:
            obj = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            first = min((ln for _, ln in entries.values()), default=None)
            raise ConfigError(f"[{name}] {exc}", first, source) from None
        if name.startswith("mtf."):
            sensors[name.split(".", 1)[1]] = obj
        else:
            built[name] = obj
    try:
        return OTFMConfig(sensors=sensors, **built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), None, source) from None


def load_config(path) -> OTFMConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def format_config(cfg: OTFMConfig) -> str:
    lines: List[str] = []
    d = cfg.to_dict()
    for name in SECTION_TYPES:
        lines.append(f"[{name}]")
        for key, value in d[name].items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    for sensor, values in d["sensors"].items():
        lines.append(f"[mtf.{sensor}]")
        for key, value in values.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: OTFMConfig, overrides: Dict[str, str]) -> OTFMConfig:
    """Apply ``section.key -> text`` overrides and re-validate."""
    d = cfg.to_dict()
    for dotted, text in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown section {section!r} in override")
        hints = get_type_hints(SECTION_TYPES[section])
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            d[section][key] = _parse_value(str(text), hints[key])
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
    try:
        return OTFMConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
