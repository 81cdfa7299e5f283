"""Run configuration and the flat ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration values."""


# Helen ordering: background, skin, l/r brow, l/r eye, nose, upper lip, inner mouth, lower lip, hair
CLASS_NAMES = (
    "background",
    "skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
    "hair",
)

# Merged components used by the Helen overall F1: brows, eyes, nose, mouth.
HELEN_GROUPS = ((2, 3), (4, 5), (6,), (7, 8, 9))

DEFAULT_PALETTE = (
    (0.45, 0.55, 0.50),  # background
    (0.85, 0.66, 0.52),  # skin
    (0.30, 0.20, 0.15),  # left brow
    (0.30, 0.20, 0.15),  # right brow
    (0.95, 0.95, 0.92),  # left eye
    (0.95, 0.95, 0.92),  # right eye
    (0.80, 0.56, 0.44),  # nose
    (0.75, 0.30, 0.32),  # upper lip
    (0.35, 0.08, 0.10),  # inner mouth
    (0.72, 0.32, 0.34),  # lower lip
    (0.22, 0.16, 0.12),  # hair
)


@dataclass
class SceneConfig:
    image_size: int = 96
    num_classes: int = 11
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    color_jitter: float = 0.08
    shape_jitter: float = 0.12
    texture_noise_sigma: float = 0.05

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigError(f"image_size must be >= 32 and divisible by 16, got {self.image_size}")
        if self.num_classes != len(CLASS_NAMES):
            # the face layout draws exactly the Helen component set
            raise ConfigError(f"num_classes must be {len(CLASS_NAMES)} for the face layout, got {self.num_classes}")
        if len(self.palette) != self.num_classes:
            raise ConfigError("palette needs one color per class")
        if not 0 <= self.shape_jitter < 0.5:
            raise ConfigError("shape_jitter must lie in [0, 0.5)")
        if self.color_jitter < 0 or self.texture_noise_sigma < 0:
            raise ConfigError("color_jitter and texture_noise_sigma must be non-negative")


@dataclass
class DataConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_train: int = 400
    n_val: int = 100
    noise_rate: float = 0.2
    seed: int = 0
    augment: bool = True
    edge_thickness: int = 1

    def validate(self) -> None:
        self.scene.validate()
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if self.edge_thickness < 1:
            raise ConfigError("edge_thickness must be >= 1")


@dataclass
class ModelConfig:
    num_classes: int = 11
    base_width: int = 32
    context: str = "ddgcn"  # "ddgcn" or "conv" (plain 3x3 conv unit)
    use_edges: bool = True
    ddgcn_node_dim: int = 64
    ddgcn_feature_nodes: int = 64
    context_width: int = 256  # output width of the "conv" context unit
    head_width: int = 48
    edge_width: int = 32

    def validate(self) -> None:
        widths = (self.base_width, self.ddgcn_node_dim, self.ddgcn_feature_nodes,
                  self.context_width, self.head_width, self.edge_width)
        if min(widths) <= 0:
            raise ConfigError("all widths must be positive")
        if self.base_width % 2:
            raise ConfigError("base_width must be even")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.context not in ("ddgcn", "conv"):
            raise ConfigError(f"unknown context module {self.context!r}")


THIN_CLASSES = (7, 9)  # lip bands


def default_class_weights(num_classes: int = 11) -> tuple[float, ...]:
    return tuple(2.0 if j in THIN_CLASSES else 1.0 for j in range(num_classes))


@dataclass
class LossWeights:
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 4.0
    lambda4: float = 1.0
    alpha0: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 0.1
    class_weights: tuple[float, ...] = field(default_factory=default_class_weights)

    def validate(self, num_classes: int | None = None) -> None:
        scalars = [getattr(self, f"lambda{i}") for i in range(5)]
        scalars += [getattr(self, f"alpha{i}") for i in range(3)]
        if min(scalars) < 0 or min(self.class_weights, default=0.0) < 0:
            raise ConfigError("loss weights must be non-negative")
        if num_classes is not None and len(self.class_weights) != num_classes:
            raise ConfigError(f"class_weights needs {num_classes} entries, got {len(self.class_weights)}")


@dataclass
class ScheduleConfig:
    init_epochs: int = 30
    K: int = 5
    N: int = 3
    lr: float = 0.02
    min_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    batch_size: int = 16
    select_last: int = 5  # initial best model picked over the last few init epochs
    cycle_lr: float = 0.01  # peak of each cosine cycle
    keep_gt_loss: bool = True

    def validate(self) -> None:
        if self.init_epochs < 1:
            raise ConfigError("init_epochs must be >= 1")
        if self.K < 0 or self.N < 1:
            raise ConfigError("K must be >= 0 and N >= 1")
        if self.lr <= 0 or self.cycle_lr <= 0 or self.min_lr < 0 or self.batch_size < 2 or self.select_last < 1:
            raise ConfigError("lr, batch_size and select_last must be positive")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    csr: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"
    data_dir: str = ""

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.loss.validate(self.model.num_classes)
        self.csr.validate()
        if self.model.num_classes != self.data.scene.num_classes:
            raise ConfigError("model.num_classes and data.scene.num_classes disagree")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def preset(name: str) -> RunConfig:
    """Named starting points: ``desk`` (CPU-sized schedule) and ``full`` (full-scale published schedule)."""
    cfg = RunConfig()
    if name == "desk":
        return cfg
    if name == "full":
        cfg.csr.init_epochs = 150
        cfg.csr.K = 5
        cfg.csr.N = 10
        cfg.csr.lr = 0.001
        cfg.csr.cycle_lr = 0.001
        cfg.csr.batch_size = 28
        return cfg
    raise ConfigError(f"unknown preset {name!r}")


# --- flat text serialization -------------------------------------------------

def _flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(_format(v) for v in row) for row in value)
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            args = typing.get_args(hint)
            inner = args[0]
            if typing.get_origin(inner) is tuple:
                rows = [r for r in raw.split(";") if r.strip()]
                return tuple(_coerce(r, inner, key) for r in rows)
            return tuple(_coerce(v, inner, key) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if isinstance(hint, types.UnionType):
        raise ConfigError(f"unsupported field type for {key}")
    raise ConfigError(f"unsupported field type for {key}: {hint}")


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg).items())


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    """Apply one dotted-key override such as ``csr.K=0``."""
    target: Any = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    hints = typing.get_type_hints(type(target)) if dataclasses.is_dataclass(target) else {}
    if name not in hints or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw, hints[name], key))


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw)
    return cfg


def load(path: str | Path, overrides: list[str] | None = None, base: RunConfig | None = None) -> RunConfig:
    cfg = from_text(Path(path).read_text(), base)
    apply_overrides(cfg, overrides or [])
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_value(cfg, key, raw)
    return cfg


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(to_text(cfg))
