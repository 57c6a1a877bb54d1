"""Run configuration: dataclass sections plus a flat ``section.key = value`` text format.

Files are plain text, one ``section.key = value`` per line, ``#`` comments.
Values are Python literals (``64``, ``1e-4``, ``[32, 64]``, ``true``); anything
that does not parse as a literal is kept as a bare string.  Every key has a
default here, and :func:`dump_config` writes the full set, so a dumped file
documents the complete run.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    profile: str = "toy"
    stem_width: int = 16
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    blocks: list = field(default_factory=lambda: [2, 2, 2, 2])
    groups: int = 8
    # DFAM off = Deformable-DETR-style baseline: standard C5, no attention, level 4 from C5
    dfam: bool = True
    reduction: int = 4
    attention_kernel: int = 7


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    points: int = 4
    levels: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    dim_feedforward: int = 256
    queries: int = 25
    num_classes: int = 1
    prior_prob: float = 0.01


@dataclass
class LossConfig:
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # "focal" or "prob": class term of the matching cost
    match_cost: str = "focal"
    aux_loss: bool = True


@dataclass
class DataConfig:
    # "synthetic" or "coco"
    source: str = "synthetic"
    image_size: int = 128
    num_train: int = 2000
    num_val: int = 200
    min_objects: int = 1
    max_objects: int = 3
    min_aspect: float = 5.0
    max_aspect: float = 40.0
    min_length: float = 0.3
    max_length: float = 0.8
    min_thickness: float = 2.0
    rotation_deg: list = field(default_factory=lambda: [0.0, 180.0])
    contrast: float = 0.6
    noise: float = 0.05
    synthetic_classes: int = 1
    coco_annotations: str = ""
    coco_images: str = ""
    coco_val_annotations: str = ""
    coco_val_images: str = ""
    categories: list = field(default_factory=lambda: ["toothbrush", "snowboard", "surfboard",
                                                      "knife", "fork", "skis"])
    augment: bool = True
    crop_min_scale: float = 0.6
    crop_prob: float = 0.5
    visibility: float = 0.25


@dataclass
class OptimConfig:
    lr: float = 1e-4
    lr_backbone: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_drop_epochs: int = 20
    lr_decay: float = 0.1
    clip_max_norm: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    seed: int = 0
    precision: str = "float32"
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    eval_every: int = 1
    score_floor: float = 0.0
    max_detections: int = 100
    max_steps: int = 0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        o, t, m, b = self.optim, self.train, self.model, self.backbone
        problems = []
        if not (o.lr > 0 and o.lr_backbone > 0):
            problems.append("learning rates must be > 0")
        if t.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if not (0 < o.lr_decay <= 1):
            problems.append("optim.lr_decay must be in (0, 1]")
        if m.d_model % m.heads:
            problems.append("model.d_model must be divisible by model.heads")
        if m.levels != 4:
            problems.append("model.levels must equal the 4 pyramid levels")
        if len(b.widths) != 4 or len(b.blocks) != 4:
            problems.append("backbone.widths and backbone.blocks need 4 stages")
        if any(w % b.groups for w in [b.stem_width, *b.widths]):
            problems.append("backbone widths must be divisible by backbone.groups")
        if self.data.image_size % 64:
            problems.append("data.image_size must be divisible by 64")
        if t.precision not in ("float32", "float64"):
            problems.append("train.precision must be float32 or float64")
        if self.loss.match_cost not in ("focal", "prob"):
            problems.append("loss.match_cost must be 'focal' or 'prob'")
        if self.data.min_aspect <= 1 or self.data.min_aspect > self.data.max_aspect:
            problems.append("data aspect range must satisfy 1 < min_aspect <= max_aspect")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def toy_config() -> RunConfig:
    return RunConfig()


def full_config() -> RunConfig:
    cfg = RunConfig()
    cfg.backbone = BackboneConfig(profile="full", stem_width=64, widths=[64, 128, 256, 512],
                                  blocks=[2, 2, 2, 2], groups=8, reduction=16)
    cfg.model = ModelConfig(d_model=256, heads=8, points=4, enc_layers=6, dec_layers=6,
                            dim_feedforward=1024, queries=300)
    cfg.data.image_size = 512
    return cfg


PROFILES = {"toy": toy_config, "full": full_config}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return str(value)


def apply_overrides(cfg: RunConfig, items: dict) -> RunConfig:
    for key, value in items.items():
        section, _, name = key.partition(".")
        part = getattr(cfg, section, None)
        if part is None or not dataclasses.is_dataclass(part) or not hasattr(part, name):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(part, name, _coerce(value, getattr(part, name), key))
    return cfg


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = parse_value(value)
    profile = items.pop("backbone.profile", None)
    if base is None:
        base = PROFILES.get(profile or "toy", toy_config)()
    cfg = apply_overrides(base, items)
    if profile is not None:
        cfg.backbone.profile = str(profile)
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def config_to_dict(cfg: RunConfig) -> dict:
    return {f"{s}.{k}": v for s, sec in dataclasses.asdict(cfg).items() for k, v in sec.items()}


def dict_to_config(items: dict) -> RunConfig:
    cfg = PROFILES.get(items.get("backbone.profile", "toy"), toy_config)()
    return apply_overrides(cfg, items)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    return repr(value)


def dump_config(cfg: RunConfig) -> str:
    lines, current = [], None
    for key, value in config_to_dict(cfg).items():
        section = key.split(".")[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# [{section}]")
            current = section
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
