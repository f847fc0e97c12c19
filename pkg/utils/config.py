"""
Experiment configuration: nested dataclasses loaded from TOML, `section.field=value`
overrides, validation and a stable hash of the resolved values.
"""

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from utils.channel_sim import MODES, FasGeometry, GridConfig
from utils.compression import DEFAULT_THRESHOLD
from utils.errors import ConfigurationError
from utils.link_metrics import DEFAULT_ACTIVE_FRACTION
from utils.micro_model import ModelConfig
from utils.training import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class ScattererConfig:
    n_paths: int = 12
    kappa: float = 5.0
    seed: int = 42
    los_doppler_bin: Optional[int] = None

    def __post_init__(self):
        if int(self.n_paths) < 0:
            raise ConfigurationError("scatterers.n_paths", "must be >= 0")
        if not float(self.kappa) >= 0:
            raise ConfigurationError("scatterers.kappa", "must be >= 0")
        self.n_paths, self.kappa, self.seed = int(self.n_paths), float(self.kappa), int(self.seed)


@dataclass
class CompressionConfig:
    threshold: float = DEFAULT_THRESHOLD
    delta_encoding: bool = False
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError("compression.threshold", "must lie in (0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("compression.train_fraction", "must lie in (0, 1)")


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    lora_rank: int = 8
    lora_alpha: float = 1.0
    ff_mult: int = 4
    linear_skip: bool = True


def _sweep(start: float, stop: float, step: float) -> List[float]:
    return [round(float(v), 10) for v in np.arange(start, stop + step / 2, step)]


@dataclass
class EvalConfig:
    horizons: List[int] = field(default_factory=lambda: [10, 20, 30, 40, 50])
    snr_db: List[float] = field(default_factory=lambda: _sweep(0.0, 20.0, 2.0))
    target_rates: List[float] = field(default_factory=lambda: _sweep(0.5, 3.5, 0.5))
    ar_order: int = 8
    ar_ridge: float = 1e-3
    active_tap_fraction: float = DEFAULT_ACTIVE_FRACTION

    def __post_init__(self):
        if not self.horizons or any(int(m) < 1 for m in self.horizons):
            raise ConfigurationError("eval.horizons", "must be a non-empty list of positive integers")
        if any(r < 0 for r in self.target_rates):
            raise ConfigurationError("eval.target_rates", "must be >= 0")
        if int(self.ar_order) < 1:
            raise ConfigurationError("eval.ar_order", "must be >= 1")
        if self.ar_ridge < 0:
            raise ConfigurationError("eval.ar_ridge", "must be >= 0")
        if not 0.0 < self.active_tap_fraction <= 1.0:
            raise ConfigurationError("eval.active_tap_fraction", "must lie in (0, 1]")
        self.horizons = [int(m) for m in self.horizons]


_SECTIONS = {
    "geometry": FasGeometry,
    "grid": GridConfig,
    "scatterers": ScattererConfig,
    "compression": CompressionConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    geometry: FasGeometry = field(default_factory=FasGeometry)
    grid: GridConfig = field(default_factory=GridConfig)
    scatterers: ScattererConfig = field(default_factory=ScattererConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    n_frames: int = 600
    mode: str = "phase_ramp"
    past_window: int = 50
    horizon: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError("mode", f"must be one of {MODES}")
        if int(self.n_frames) < 1:
            raise ConfigurationError("n_frames", "must be >= 1")
        if int(self.past_window) < 1:
            raise ConfigurationError("past_window", "must be >= 1")
        if int(self.horizon) < 1:
            raise ConfigurationError("horizon", "must be >= 1")
        self.n_frames, self.past_window, self.horizon = int(self.n_frames), int(self.past_window), int(self.horizon)

    def model_config(self, feature_dim: int, horizon: Optional[int] = None, lora: bool = True) -> ModelConfig:
        m = self.model
        return ModelConfig(feature_dim=feature_dim, d_model=m.d_model, n_heads=m.n_heads,
                           n_layers=m.n_layers, lora_rank=m.lora_rank if lora else 0,
                           lora_alpha=m.lora_alpha, horizon=horizon or self.horizon,
                           past_window=self.past_window, ff_mult=m.ff_mult,
                           linear_skip=m.linear_skip)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash ngắn của cấu hình đã resolve"""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def parse_override(text: str):
    """'section.field=value' → (['section', 'field'], value); the value is read as a TOML literal"""
    if "=" not in text:
        raise ConfigurationError(text, "override must look like section.field=value")
    key, raw = text.split("=", 1)
    path = [part.strip() for part in key.strip().split(".") if part.strip()]
    if not path or len(path) > 2:
        raise ConfigurationError(key, "override key must be 'field' or 'section.field'")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def _apply_override(raw: Dict[str, Any], path: List[str], value):
    if len(path) == 1:
        raw[path[0]] = value
    else:
        section = raw.setdefault(path[0], {})
        if not isinstance(section, dict):
            raise ConfigurationError(path[0], "is not a section")
        section[path[1]] = value


def _build_section(name: str, cls, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigurationError(name, "must be a table")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigurationError(f"{name}.{key}", "unknown key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(name, str(exc)) from exc


def build_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Dựng ExperimentConfig từ dict thô, báo lỗi với key không biết"""
    top_level = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key in top_level:
            kwargs[key] = value
        else:
            raise ConfigurationError(key, "unknown key")
    return ExperimentConfig(**kwargs)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a TOML file (or start from defaults), apply overrides, then validate"""
    raw: Dict[str, Any] = {}
    if path:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(path, f"invalid TOML ({exc})") from exc
    for text in overrides:
        key_path, value = parse_override(text)
        _apply_override(raw, key_path, value)
    cfg = build_config(raw)
    logger.debug("Resolved configuration %s", cfg.hash)
    return cfg
