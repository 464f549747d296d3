"""Run configuration: typed sections, INI loading, overrides and hashing.

The on-disk format is INI (``configparser``): one ``[section]`` per dataclass
below, ``key = value`` lines. Every key defaults to the published recipe.
Tuples are written comma-separated, booleans as ``true``/``false``.
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple

from .errors import ConfigError

VARIANTS = ("vqgan", "vqgan_mc", "vqgan_mc_rb", "full")


@dataclass
class RunConfig:
    seed: int = 0
    id: str = ""


@dataclass
class DataConfig:
    manifest: str = ""
    train_fraction: float = 178 / 222
    image_size: int = 256


@dataclass
class GeneratorConfig:
    variant: str = "full"
    channels: Tuple[int, ...] = (64, 128, 256, 512)
    n_res_blocks: int = 6
    # residual blocks kept per side when use_resblocks is off
    n_res_blocks_min: int = 2
    codebook_size: int = 1024
    codebook_dim: int = 512
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    cbam_reduction: int = 16
    # each multi-scale branch emits out_channels // ms_branch_div maps
    ms_branch_div: int = 7
    dropout: float = 0.5
    use_multiscale: bool = True
    use_resblocks: bool = True
    use_cbam: bool = True


@dataclass
class DiscriminatorConfig:
    in_channels: int = 2
    channels: Tuple[int, ...] = (64, 128, 256)
    negative_slope: float = 0.2


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_rec: float = 10.0
    lambda_perc: float = 10.0
    lambda_vq: float = 5.0
    r1_gamma: float = 10.0
    commitment_beta: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class PerceptualConfig:
    backend: str = "pretrained_vgg16"
    # indices (1-based) of the conv activations used as feature layers
    layers: Tuple[int, ...] = (2, 4, 7, 10)
    width: float = 1.0
    # fixed_random only: per-conv weight scale relative to Kaiming
    gain: float = 1.0
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 2e-4
    batch_size: int = 2
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-4
    noise_sigma_sq: float = 0.1
    label_smooth_low: float = 0.9
    label_smooth_high: float = 1.0
    checkpoint_every: int = 25
    divergence_factor: float = 10.0
    divergence_patience: int = 3


@dataclass
class ClassifierConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    hidden: Tuple[int, ...] = (128, 64)
    dropout: float = 0.3
    epochs: int = 200
    lr: float = 2e-4
    lr_decay: float = 0.98
    batch_size: int = 8
    augment: bool = True
    rotation_deg: float = 15.0
    flip_p: float = 0.5
    translate: float = 0.05
    scale_min: float = 0.95
    scale_max: float = 1.05


@dataclass
class EvalConfig:
    slice_set: str = "central100"


@dataclass
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        m = self.model
        if m.variant not in VARIANTS:
            raise ConfigError(f"model.variant: unknown variant {m.variant!r}")
        if len(m.channels) != 4:
            raise ConfigError("model.channels: expected four entries (stem + 3 stages)")
        if self.train.epochs <= 0:
            raise ConfigError("train.epochs: must be > 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.train_fraction: must lie in (0, 1)")
        if self.eval.slice_set not in ("train14", "central100"):
            raise ConfigError(f"eval.slice_set: unknown value {self.eval.slice_set!r}")
        if self.perceptual.backend not in ("pretrained_vgg16", "fixed_random"):
            raise ConfigError(f"perceptual.backend: unknown backend {self.perceptual.backend!r}")
        for name, value in dataclasses.asdict(self.loss).items():
            if value < 0:
                raise ConfigError(f"loss.{name}: must be >= 0")
        lo, hi = self.train.label_smooth_low, self.train.label_smooth_high
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("train.label_smooth_low/high: need 0 <= low <= high <= 1")
        return self


def _parse(value, annotation, key):
    try:
        if annotation is bool:
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if annotation in (int, float, str):
            return annotation(value)
        if annotation == Tuple[int, ...]:
            if isinstance(value, (tuple, list)):
                return tuple(int(v) for v in value)
            return tuple(int(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    raise ConfigError(f"{key}: unsupported type {annotation}")


def set_key(cfg, dotted, value):
    """Set ``section.key`` from a string (or already-typed) value."""
    if "." not in dotted:
        raise ConfigError(f"{dotted}: expected section.key")
    section, key = dotted.split(".", 1)
    sec = getattr(cfg, section, None)
    if sec is None or not dataclasses.is_dataclass(sec):
        raise ConfigError(f"{dotted}: unknown section {section!r}")
    types = {f.name: f.type for f in fields(sec)}
    if key not in types:
        raise ConfigError(f"{dotted}: unknown key")
    setattr(sec, key, _parse(value, types[key], dotted))
    if dotted == "model.variant":
        apply_variant(cfg.model, cfg.model.variant)


def apply_variant(model_cfg, name):
    flags = {
        "vqgan": (False, False, False),
        "vqgan_mc": (True, False, False),
        "vqgan_mc_rb": (True, True, False),
        "full": (True, True, True),
    }
    if name not in flags:
        raise ConfigError(f"model.variant: unknown variant {name!r}")
    model_cfg.variant = name
    model_cfg.use_multiscale, model_cfg.use_resblocks, model_cfg.use_cbam = flags[name]
    return model_cfg


def load_config(path=None, overrides=()):
    """Defaults <- INI file <- ``overrides`` (iterable of ``section.key=value``)."""
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        # variant first so explicit flag keys in the file win over it
        if parser.has_option("model", "variant"):
            set_key(cfg, "model.variant", parser.get("model", "variant"))
        for section in parser.sections():
            for key, value in parser.items(section):
                if f"{section}.{key}" != "model.variant":
                    set_key(cfg, f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: expected section.key=value")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v.strip())
    return cfg.validate()


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg):
    """Serialize to INI text that ``load_config`` reads back identically."""
    lines = []
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in fields(sec):
            lines.append(f"{sf.name} = {_fmt(getattr(sec, sf.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    Path(path).write_text(dump_config(cfg))


def default_table():
    """Rows of (``section.key``, default) for every configuration key."""
    cfg = Config()
    return [
        (f"{f.name}.{sf.name}", _fmt(getattr(getattr(cfg, f.name), sf.name)))
        for f in fields(cfg)
        for sf in fields(getattr(cfg, f.name))
    ]


def stable_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def gan_hash(cfg):
    """Hash of everything that fixes the GAN parameter layout."""
    return stable_hash({
        "model": dataclasses.asdict(cfg.model),
        "discriminator": dataclasses.asdict(cfg.discriminator),
        "image_size": cfg.data.image_size,
    })


def classifier_hash(cfg):
    c = cfg.classifier
    return stable_hash({
        "channels": c.channels, "hidden": c.hidden, "dropout": c.dropout,
        "image_size": cfg.data.image_size,
    })


def derive_seed(root_seed, component):
    """Per-component seed from a stable hash of (root seed, component name)."""
    digest = hashlib.sha256(f"{root_seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def tiny_config(**overrides):
    """Desk-scale configuration used by the smoke and gradient tests."""
    cfg = Config()
    cfg.data.image_size = 32
    cfg.model.channels = (4, 8, 16, 32)
    cfg.model.codebook_size = 16
    cfg.model.codebook_dim = 8
    cfg.model.cbam_reduction = 4
    cfg.model.n_res_blocks = 2
    cfg.model.n_res_blocks_min = 1
    cfg.discriminator.channels = (8, 16, 32)
    cfg.perceptual.backend = "fixed_random"
    cfg.perceptual.width = 0.125
    cfg.perceptual.gain = 0.5
    cfg.classifier.channels = (8, 16, 32, 64, 64)
    cfg.classifier.hidden = (32, 16)
    for k, v in overrides.items():
        set_key(cfg, k.replace("__", "."), v)
    return cfg.validate()


def config_from_dict(d):
    """Inverse of ``Config.to_dict`` (used when restoring checkpoints)."""
    cfg = Config()
    for section, values in d.items():
        for key, value in values.items():
            set_key(cfg, f"{section}.{key}", value)
    return cfg.validate()
