import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from slimdet.errors import ConfigError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def default_aspect_ratios(count: int) -> List[float]:
    """Aspect ratios for a cell holding ``count`` priors (the extra prior is implicit)."""
    if count == 4:
        return [1.0, 2.0, 0.5]
    if count == 6:
        return [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0]
    raise ConfigError(f"priors_per_cell must be 4 or 6, got {count}")


@dataclass
class PriorConfig:
    """Prior-box layout: one entry per detection level."""

    feature_maps: List[int] = field(default_factory=lambda: [24, 12, 6, 3])
    priors_per_cell: List[int] = field(default_factory=lambda: [6, 4, 4, 4])
    min_scale: float = 0.1
    max_scale: float = 0.6
    aspect_ratios: Optional[List[List[float]]] = None

    def __post_init__(self):
        self.feature_maps = [int(f) for f in self.feature_maps]
        self.priors_per_cell = [int(n) for n in self.priors_per_cell]
        if self.aspect_ratios is None:
            self.aspect_ratios = [default_aspect_ratios(n) if n in (4, 6) else [] for n in self.priors_per_cell]

    @classmethod
    def ssd300_fused(cls) -> "PriorConfig":
        """SSD300 grid with six priors on the four finest levels (11620 boxes)."""
        return cls(feature_maps=[38, 19, 10, 5, 3, 1], priors_per_cell=[6, 6, 6, 6, 4, 4],
                   min_scale=0.2, max_scale=0.9)

    @classmethod
    def ssd300_classic(cls) -> "PriorConfig":
        """Classic SSD300 layout (8732 boxes)."""
        return cls(feature_maps=[38, 19, 10, 5, 3, 1], priors_per_cell=[4, 6, 6, 6, 4, 4],
                   min_scale=0.2, max_scale=0.9)

    @property
    def num_levels(self) -> int:
        return len(self.feature_maps)

    def total(self) -> int:
        return sum(f * f * n for f, n in zip(self.feature_maps, self.priors_per_cell))

    def validate(self) -> "PriorConfig":
        if not self.feature_maps:
            raise ConfigError("priors.feature_maps must not be empty")
        if len(self.feature_maps) != len(self.priors_per_cell):
            raise ConfigError("priors.feature_maps and priors.priors_per_cell differ in length")
        for f in self.feature_maps:
            if f < 1:
                raise ConfigError(f"priors.feature_maps entries must be >= 1, got {f}")
        for n in self.priors_per_cell:
            if n not in (4, 6):
                raise ConfigError(f"priors.priors_per_cell must be 4 or 6, got {n}")
        if not (0.0 < self.min_scale <= self.max_scale <= 1.0):
            raise ConfigError(
                f"priors scales must satisfy 0 < min_scale <= max_scale <= 1, got "
                f"({self.min_scale}, {self.max_scale})")
        if len(self.aspect_ratios) != len(self.priors_per_cell):
            raise ConfigError("priors.aspect_ratios must have one set per level")
        for k, (ratios, n) in enumerate(zip(self.aspect_ratios, self.priors_per_cell)):
            if len(ratios) + 1 != n:
                raise ConfigError(f"priors.aspect_ratios[{k}] gives {len(ratios) + 1} priors, expected {n}")
            if any(r <= 0 for r in ratios):
                raise ConfigError(f"priors.aspect_ratios[{k}] must be positive")
        return self


@dataclass
class ArchConfig:
    """Architecture description consumed by ``build_mfssd``."""

    input_size: int = 96
    in_channels: int = 3
    num_classes: int = 3
    stage_a: List[int] = field(default_factory=lambda: [16, 16])
    stage_b: List[int] = field(default_factory=lambda: [32, 64])
    stage_c: int = 128
    stage_d: int = 128
    fusion: List[int] = field(default_factory=lambda: [64, 32, 32])
    pyramid: List[int] = field(default_factory=lambda: [64, 64, 64])
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if isinstance(self.priors, dict):
            self.priors = PriorConfig(**self.priors)

    @classmethod
    def tiny(cls, num_classes: int = 3) -> "ArchConfig":
        """32x32 model used by the test-suite; same topology, narrow widths."""
        return cls(input_size=32, num_classes=num_classes, stage_a=[4, 4], stage_b=[8, 8],
                   stage_c=8, stage_d=8, fusion=[8, 4, 4], pyramid=[8, 8, 8],
                   priors=PriorConfig(feature_maps=[8, 4, 2, 1], priors_per_cell=[6, 4, 4, 4],
                                      min_scale=0.15, max_scale=0.7))

    def validate(self) -> "ArchConfig":
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError(f"arch.input_size must be a positive multiple of 8, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError("arch.num_classes must be >= 1")
        for key in ("stage_a", "stage_b", "fusion", "pyramid"):
            widths = getattr(self, key)
            if not widths or any(int(w) < 1 for w in widths):
                raise ConfigError(f"arch.{key} must be a non-empty list of positive widths")
        if len(self.stage_b) != 2:
            raise ConfigError("arch.stage_b must list two widths")
        if len(self.fusion) != 3:
            raise ConfigError("arch.fusion must list three projection widths")
        if self.stage_c < 1 or self.stage_d < 1:
            raise ConfigError("arch.stage_c and arch.stage_d must be positive")
        self.priors.validate()
        return self


@dataclass
class TrainConfig:
    """SGD schedule and the sparsity weight of the slimming objective."""

    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_step_epochs: List[int] = field(default_factory=lambda: [30, 45])
    lr_step_factor: float = 0.1
    warmup_epochs: int = 5
    sparsity_lambda: float = 0.0
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    neg_pos_ratio: float = 3.0
    iou_threshold: float = 0.5

    @classmethod
    def voc_schedule(cls, **overrides) -> "TrainConfig":
        """The large-batch VOC schedule (lr 0.4, x0.1 at 150/200/250)."""
        values = dict(base_lr=0.4, lr_step_epochs=[150, 200, 250], epochs=250)
        values.update(overrides)
        return cls(**values)

    def validate(self) -> "TrainConfig":
        if not self.base_lr > 0:
            raise ConfigError(f"train.base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 < self.lr_step_factor < 1.0:
            raise ConfigError(f"train.lr_step_factor must lie in (0, 1), got {self.lr_step_factor}")
        if self.sparsity_lambda < 0:
            raise ConfigError(f"train.sparsity_lambda must be >= 0, got {self.sparsity_lambda}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ConfigError("train.warmup_epochs and train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError("train.iou_threshold must lie in (0, 1)")
        if not (math.isfinite(self.base_lr) and math.isfinite(self.sparsity_lambda)):
            raise ConfigError("train values must be finite")
        return self


@dataclass
class RunConfig:
    """Everything a config file can carry."""

    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune_lr_scale: float = 0.1
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        self.arch.validate()
        self.train.validate()
        if not 0.0 < self.finetune_lr_scale <= 1.0:
            raise ConfigError("finetune_lr_scale must lie in (0, 1]")
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"log_level must be DEBUG, INFO, WARNING or ERROR, got '{self.log_level}'")
        return self


def _build(cls, values: Dict[str, Any], prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{prefix.rstrip('.')}' section: {e}")


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from a JSON-shaped dictionary."""
    data = dict(data)
    arch_values = dict(data.pop("arch", {}))
    priors = arch_values.pop("priors", None)
    arch = _build(ArchConfig, arch_values, "arch.")
    if priors is not None:
        arch.priors = _build(PriorConfig, dict(priors), "arch.priors.")
    train = _build(TrainConfig, dict(data.pop("train", {})), "train.")
    run = _build(RunConfig, data, "")
    run.arch = arch
    run.train = train
    return run.validate()


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Canonical echo of the effective configuration."""
    return asdict(config)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a JSON config file and apply flag overrides.

    Args:
        path: Config file path; defaults are used when omitted
        overrides: Dotted keys ("train.base_lr") mapped to values; ``None`` values are skipped

    Returns:
        The validated effective configuration
    """
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(data)


class SlimDetConfig:
    """Runtime settings shared by the pipeline components."""

    def __init__(
        self,
        work_dir: str = ".",
        run: Optional[RunConfig] = None,
        log_level: int = logging.INFO,
    ):
        """
        Initialize the configuration.

        Args:
            work_dir: Directory outputs are written under
            run: Effective architecture/training configuration
            log_level: Logging level
        """
        self.work_dir = work_dir
        self.run = run or RunConfig()

        # Set up logger
        self.logger = logging.getLogger("SlimDet")
        self.logger.setLevel(log_level)

        # Check if handler already exists to prevent duplicate logs
        if not self.logger.handlers:
            handler = logging.StreamHandler()
            handler.setLevel(log_level)
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
            self.logger.addHandler(handler)

    @property
    def arch(self) -> ArchConfig:
        return self.run.arch

    @property
    def train(self) -> TrainConfig:
        return self.run.train
