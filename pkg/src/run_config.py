"""
Run configuration files.

Flat INI files ([section] / key = value) parsed into the typed settings
of each subcommand. Unknown sections and keys are rejected; every value
is validated by the dataclass it ends up in. to_ini() renders the
effective configuration (defaults included) for the config echo.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from src.attack import AttackConfig, ablation_variant
from src.config import Config
from src.controlled import ControlledConfig, SweepGrid
from src.dataset import DatasetSpec
from src.exceptions import ConfigError
from src.losses import LossConfig
from src.seeding import derive_seed
from src.training import TrainSettings
from src.vit import ViTConfig

logger = logging.getLogger(__name__)

COMMANDS = ("train", "attack", "controlled", "diagnose")
REPORTS = ("singular_values", "gradient_ratio", "token_export", "traces", "key_replacement")


# ============================================================================
# VALUE PARSERS
# ============================================================================

def parse_int(raw: str) -> int:
    return int(raw.strip())


def parse_float(raw: str) -> float:
    """Decimal or fraction such as 8/255."""
    return float(Fraction(raw.strip()))


def parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_optional_int(raw: str) -> Optional[int]:
    """Integer, or all / none for 'not set'."""
    if raw.strip().lower() in ("", "all", "none"):
        return None
    return parse_int(raw)


def parse_optional_str(raw: str) -> Optional[str]:
    value = raw.strip()
    return None if value.lower() in ("", "none") else value


def parse_list(item: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def _parse(raw: str) -> List[Any]:
        return [item(part) for part in raw.split(",") if part.strip()]
    return _parse


def parse_str(raw: str) -> str:
    return raw.strip()


def parse_grid_positions(raw: str) -> Optional[List[Tuple[int, int]]]:
    """'0,0; 1,2' -> [(0, 0), (1, 2)]; empty means 'template placement'."""
    if not raw.strip() or raw.strip().lower() == "none":
        return None
    positions = []
    for chunk in raw.split(";"):
        row, col = parse_list(parse_int)(chunk)
        positions.append((row, col))
    return positions


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return "; ".join(",".join(str(v) for v in item) for item in value)
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ============================================================================
# SETTINGS
# ============================================================================

@dataclass
class RunSettings:
    seed: int = Config.SEED
    output_dir: str = Config.OUTPUT_DIR
    threads: int = Config.THREADS

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class DatasetSettings:
    samples_per_class: int = 64
    test_samples_per_class: int = 16
    noise: float = 0.3

    def spec(self, vit: ViTConfig, split: str = "train") -> DatasetSpec:
        count = self.test_samples_per_class if split != "train" else self.samples_per_class
        return DatasetSpec(num_classes=vit.num_classes, image_size=vit.image_size, channels=vit.channels,
                           samples_per_class=count, noise=self.noise)

    def __post_init__(self):
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ConfigError("samples per class must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


@dataclass
class AttackSettings:
    checkpoint: str = ""
    num_images: int = 64
    patch_row: int = 0
    patch_col: int = 0
    patch_tokens: int = 1
    iterations: int = 250
    step_size: float = 8 / 255
    momentum: float = 0.9
    use_momentum: bool = True

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigError(f"num_images must be >= 1, got {self.num_images}")
        if self.patch_tokens < 1:
            raise ConfigError(f"patch_tokens must be >= 1 (a 0x0 patch is not an attack), got {self.patch_tokens}")
        self.attack_config(LossConfig(), 0)

    def attack_config(self, loss: LossConfig, seed: int) -> AttackConfig:
        return AttackConfig(iterations=self.iterations, step_size=self.step_size, momentum=self.momentum,
                            use_momentum=self.use_momentum, seed=derive_seed(seed, "attack"), loss=loss)


@dataclass
class AblationSettings:
    enabled: bool = False
    variants: List[str] = field(default_factory=lambda: ["baseline"])
    locations: Optional[List[Tuple[int, int]]] = None
    sizes: Optional[List[int]] = None
    num_images: Optional[int] = None

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("ablation needs at least one variant")
        if self.sizes is not None and (not self.sizes or min(self.sizes) < 1):
            raise ConfigError("ablation sizes must be >= 1 token")
        for name in self.variants:
            ablation_variant(name, AttackConfig())


@dataclass
class ControlledSettings:
    mu: List[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    w: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    d_k: List[int] = field(default_factory=lambda: [16, 64, 256])
    n: int = 64
    seeds: int = 5
    attention_threshold: float = 0.99
    success_fraction: float = 0.95
    tolerance: float = 1e-3
    scaled: bool = True
    upper_start: float = 64.0
    upper_cap: float = 4096.0
    slack: float = 0.02
    silhouette: bool = True

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError(f"controlled seeds must be >= 1, got {self.seeds}")
        if self.slack < 0:
            raise ConfigError(f"slack must be >= 0, got {self.slack}")
        self.grid(0).cells()

    def grid(self, seed: int) -> SweepGrid:
        base = ControlledConfig(
            n=self.n, attention_threshold=self.attention_threshold, success_fraction=self.success_fraction,
            tolerance=self.tolerance, scaled=self.scaled, upper_start=self.upper_start, upper_cap=self.upper_cap,
        )
        seeds = [derive_seed(seed, "controlled", i) for i in range(self.seeds)]
        return SweepGrid(mu=list(self.mu), w=list(self.w), d_k=list(self.d_k), seeds=seeds, base=base)


@dataclass
class DiagnoseSettings:
    checkpoint: str = ""
    init_checkpoint: Optional[str] = None
    reports: List[str] = field(default_factory=lambda: list(REPORTS))
    num_images: int = 8
    export_layer: int = 0
    export_head: int = 0
    compare_init: bool = False

    def __post_init__(self):
        unknown = set(self.reports) - set(REPORTS)
        if unknown:
            raise ConfigError(f"unknown reports {sorted(unknown)}, expected a subset of {REPORTS}")
        if not self.reports:
            raise ConfigError("diagnose needs at least one report")
        if self.num_images < 1:
            raise ConfigError(f"num_images must be >= 1, got {self.num_images}")
        if self.compare_init and not self.init_checkpoint:
            raise ConfigError("compare_init needs init_checkpoint")


# ============================================================================
# SCHEMA
# ============================================================================

_WEIGHT_KEYS = {f"weight_{t}": t for t in ("ce", "kq", "kq_star", "patch_fool")}

# section -> key -> parser; keys equal dataclass field names
SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "run": {"seed": parse_int, "output_dir": parse_str, "threads": parse_int},
    "vit": {
        "image_size": parse_int, "channels": parse_int, "patch_size": parse_int, "d_model": parse_int,
        "depth": parse_int, "heads": parse_int, "mlp_hidden": parse_int, "num_classes": parse_int,
        "layernorm_eps": parse_float, "qkv_bias": parse_bool,
    },
    "dataset": {"samples_per_class": parse_int, "test_samples_per_class": parse_int, "noise": parse_float},
    "train": {"epochs": parse_int, "lr": parse_float, "batch_size": parse_int},
    "attack": {
        "checkpoint": parse_str, "num_images": parse_int, "patch_row": parse_int, "patch_col": parse_int,
        "patch_tokens": parse_int, "iterations": parse_int, "step_size": parse_float,
        "momentum": parse_float, "use_momentum": parse_bool,
    },
    "loss": {
        "terms": parse_list(parse_str), "ce_mode": parse_str, "target_class": parse_optional_int,
        "target_key": parse_optional_int, "target_query": parse_int, "layer_selector": parse_optional_int,
        "head_aggregation": parse_str, "layer_aggregation": parse_str, "normalize": parse_bool,
        **{key: parse_float for key in _WEIGHT_KEYS},
    },
    "ablation": {
        "enabled": parse_bool, "variants": parse_list(parse_str), "locations": parse_grid_positions,
        "sizes": lambda raw: None if raw.strip().lower() in ("", "none") else parse_list(parse_int)(raw),
        "num_images": parse_optional_int,
    },
    "controlled": {
        "mu": parse_list(parse_float), "w": parse_list(parse_float), "d_k": parse_list(parse_int),
        "n": parse_int, "seeds": parse_int, "attention_threshold": parse_float,
        "success_fraction": parse_float, "tolerance": parse_float, "scaled": parse_bool,
        "upper_start": parse_float, "upper_cap": parse_float, "slack": parse_float, "silhouette": parse_bool,
    },
    "diagnose": {
        "checkpoint": parse_str, "init_checkpoint": parse_optional_str, "reports": parse_list(parse_str),
        "num_images": parse_int, "export_layer": parse_int, "export_head": parse_int, "compare_init": parse_bool,
    },
}

SECTIONS_BY_COMMAND = {
    "train": ("run", "vit", "dataset", "train"),
    "attack": ("run", "attack", "loss", "ablation"),
    "controlled": ("run", "controlled"),
    "diagnose": ("run", "diagnose", "attack", "loss"),
}

_SECTION_TYPES = {
    "run": RunSettings, "vit": ViTConfig, "dataset": DatasetSettings, "train": TrainSettings,
    "attack": AttackSettings, "ablation": AblationSettings, "controlled": ControlledSettings,
    "diagnose": DiagnoseSettings,
}


@dataclass
class RunConfig:
    command: str
    run: RunSettings = field(default_factory=RunSettings)
    vit: Optional[ViTConfig] = None
    dataset: Optional[DatasetSettings] = None
    train: Optional[TrainSettings] = None
    attack: Optional[AttackSettings] = None
    loss: Optional[LossConfig] = None
    ablation: Optional[AblationSettings] = None
    controlled: Optional[ControlledSettings] = None
    diagnose: Optional[DiagnoseSettings] = None

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       threads: Optional[int] = None) -> "RunConfig":
        """CLI flags win over the [run] section."""
        self.run = RunSettings(
            seed=self.run.seed if seed is None else seed,
            output_dir=self.run.output_dir if output_dir is None else output_dir,
            threads=self.run.threads if threads is None else threads,
        )
        return self

    def section(self, name: str):
        return getattr(self, name)

    def to_ini(self) -> str:
        """Effective configuration, defaults included, in a stable order."""
        lines = []
        for name in SECTIONS_BY_COMMAND[self.command]:
            settings = self.section(name)
            lines.append(f"[{name}]")
            for key in SCHEMA[name]:
                lines.append(f"{key} = {format_value(_section_value(name, settings, key))}")
            lines.append("")
        return "\n".join(lines)


def _section_value(name: str, settings: Any, key: str) -> Any:
    if name == "loss" and key in _WEIGHT_KEYS:
        return settings.weight(_WEIGHT_KEYS[key])
    return getattr(settings, key)


def _build_section(name: str, values: Dict[str, str]):
    schema = SCHEMA[name]
    unknown = set(values) - set(schema)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")

    kwargs: Dict[str, Any] = {}
    weights: Dict[str, float] = {}
    for key, raw in values.items():
        try:
            parsed = schema[key](raw)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {e}") from None
        if name == "loss" and key in _WEIGHT_KEYS:
            weights[_WEIGHT_KEYS[key]] = parsed
        else:
            kwargs[key] = parsed

    if name == "loss":
        if weights:
            kwargs["weights"] = weights
        return LossConfig(**kwargs)
    try:
        return _SECTION_TYPES[name](**kwargs)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from None


def parse_run_config(text: str, command: str) -> RunConfig:
    """Parse INI text for one subcommand."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None

    allowed = SECTIONS_BY_COMMAND[command]
    unknown = [s for s in parser.sections() if s not in allowed]
    if unknown:
        raise ConfigError(f"sections {unknown} are not valid for '{command}' (allowed: {list(allowed)})")

    config = RunConfig(command=command)
    for name in allowed:
        values = dict(parser.items(name)) if parser.has_section(name) else {}
        setattr(config, name, _build_section(name, values))
    return config


def load_run_config(path: Union[str, Path], command: str) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    logger.debug(f"loaded run config {path} for '{command}'")
    return parse_run_config(text, command)


