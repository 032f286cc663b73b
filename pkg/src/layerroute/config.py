"""Run configuration: model extents, stage settings, presets, flat-file parsing.

Config files are flat `key = value` lines with dotted section keys
(`stage1.lr = 0.02`). Precedence when resolving: CLI overrides > config file
> built-in preset. The resolved config is hashed (sha256 of its canonical
text) and stamped into checkpoints so a resume against a different
configuration is refused.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .encoder import StackDims
from .errors import ConfigError
from .objective import StageSchedule


@dataclass(frozen=True)
class ModelDims:
    n_layers: int = 12
    n_patches: int = 16
    d_visual: int = 32
    d_text: int = 24
    d_proj: int = 64
    d_dec: int = 32
    router_hidden: tuple[int, ...] = (64,)
    connector_hidden: tuple[int, ...] = (64,)
    decoder_hidden: tuple[int, ...] = (64,)
    n_classes: int = 6

    def stack(self) -> StackDims:
        return StackDims(self.n_layers, self.n_patches, self.d_visual)


@dataclass(frozen=True)
class StageConfig:
    steps: int
    lr: float
    batch: int

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be nonnegative, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch}")


@dataclass(frozen=True)
class DataConfig:
    noise_scale: float = 0.1
    query_noise: float = 0.08
    world_seed: int = 90210


@dataclass(frozen=True)
class TrainConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(500, 2e-2, 64))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(500, 1e-2, 32))
    schedule: StageSchedule = field(default_factory=lambda: StageSchedule(0.01, 0.0))
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 7
    router_mode: str = "text"


def desk_preset() -> TrainConfig:
    """Desk-scale defaults: trains in seconds, dynamics still nontrivial."""
    return TrainConfig()


def paper_preset() -> TrainConfig:
    """Full-scale extents and verbatim stage hyperparameters; used for shape
    checks only, never for desk-scale training."""
    return TrainConfig(
        dims=ModelDims(n_layers=24, n_patches=576, d_visual=1024, d_text=4096,
                       d_proj=64, d_dec=128, connector_hidden=(128,)),
        stage1=StageConfig(steps=500, lr=1e-3, batch=256),
        stage2=StageConfig(steps=500, lr=2e-5, batch=128),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {s!r}") from exc


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {s!r}") from exc


def _parse_ints(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(_parse_int(part.strip()) for part in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (attribute path, parser)
FLAT_FIELDS: dict[str, tuple[tuple[str, ...], object]] = {
    "dims.n_layers": (("dims", "n_layers"), _parse_int),
    "dims.n_patches": (("dims", "n_patches"), _parse_int),
    "dims.d_visual": (("dims", "d_visual"), _parse_int),
    "dims.d_text": (("dims", "d_text"), _parse_int),
    "dims.d_proj": (("dims", "d_proj"), _parse_int),
    "dims.d_dec": (("dims", "d_dec"), _parse_int),
    "dims.router_hidden": (("dims", "router_hidden"), _parse_ints),
    "dims.connector_hidden": (("dims", "connector_hidden"), _parse_ints),
    "dims.decoder_hidden": (("dims", "decoder_hidden"), _parse_ints),
    "dims.n_classes": (("dims", "n_classes"), _parse_int),
    "stage1.steps": (("stage1", "steps"), _parse_int),
    "stage1.lr": (("stage1", "lr"), _parse_float),
    "stage1.batch": (("stage1", "batch"), _parse_int),
    "stage2.steps": (("stage2", "steps"), _parse_int),
    "stage2.lr": (("stage2", "lr"), _parse_float),
    "stage2.batch": (("stage2", "batch"), _parse_int),
    "schedule.stage1_lambda": (("schedule", "stage1_lambda"), _parse_float),
    "schedule.stage2_lambda": (("schedule", "stage2_lambda"), _parse_float),
    "schedule.epsilon": (("schedule", "epsilon"), _parse_float),
    "data.noise_scale": (("data", "noise_scale"), _parse_float),
    "data.query_noise": (("data", "query_noise"), _parse_float),
    "data.world_seed": (("data", "world_seed"), _parse_int),
    "seed": (("seed",), _parse_int),
    "router_mode": (("router_mode",), str),
}


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    flat = {}
    for key, (path, _) in FLAT_FIELDS.items():
        obj = cfg
        for attr in path:
            obj = getattr(obj, attr)
        flat[key] = _fmt(obj)
    return flat


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Return a config with string-typed overrides applied by dotted key."""
    staged: dict[str, dict[str, object]] = {}
    top: dict[str, object] = {}
    for key, raw in overrides.items():
        if key not in FLAT_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        path, parser = FLAT_FIELDS[key]
        value = parser(raw)
        if len(path) == 1:
            top[path[0]] = value
        else:
            staged.setdefault(path[0], {})[path[1]] = value
    for section, fields in staged.items():
        top[section] = dataclasses.replace(getattr(cfg, section), **fields)
    cfg = dataclasses.replace(cfg, **top)
    if cfg.router_mode not in ("text", "multimodal"):
        raise ConfigError(f"router_mode must be 'text' or 'multimodal', got {cfg.router_mode!r}")
    return cfg


def parse_config_file(path) -> dict[str, str]:
    """Read flat `key = value` lines; '#' starts a comment."""
    overrides: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in FLAT_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = value
    return overrides


def resolve_config(preset: str = "desk", config_file=None,
                   overrides: dict[str, str] | None = None) -> TrainConfig:
    """Preset, then file settings, then explicit overrides (highest precedence)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if config_file is not None:
        cfg = apply_overrides(cfg, parse_config_file(config_file))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def canonical_text(cfg: TrainConfig) -> str:
    flat = to_flat(cfg)
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def write_config(cfg: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_text(cfg))
