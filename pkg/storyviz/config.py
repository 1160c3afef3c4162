"""Run configuration: one dataclass per module, merged into ``RunConfig``.

Configs come from a preset (``desk`` or ``paper``), optionally overlaid by a JSON
file and then by ``key.path=value`` overrides. Unknown keys are rejected with
their dotted path so typos never pass silently.
"""

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .errors import ConfigError

OUTPUT_ROOT_ENV = "STORYVIZ_OUTPUT_ROOT"
PRESETS = ("desk", "paper")
DUAL_VARIANTS = ("mart_video", "transformer_image")


@dataclass
class SynthConfig:
    """Story shape and the ShapeStories generator settings."""

    num_stories: int = 2000
    story_length: int = 5
    image_size: int = 32
    max_caption_len: int = 24
    num_characters: int = 9
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self):
        if self.num_stories < 1:
            raise ConfigError(f"data.num_stories must be >= 1, got {self.num_stories}")
        if self.story_length < 1:
            raise ConfigError(f"data.story_length must be >= 1, got {self.story_length}")
        # generator and discriminator towers halve/double the resolution
        if self.image_size < 16 or self.image_size & (self.image_size - 1):
            raise ConfigError(f"data.image_size must be a power of two >= 16, got {self.image_size}")
        if self.max_caption_len < 1:
            raise ConfigError("data.max_caption_len must be >= 1")
        if not 1 <= self.num_characters <= 9:
            raise ConfigError("data.num_characters must be between 1 and 9")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigError("data.val_fraction + data.test_fraction must be in [0, 1)")


@dataclass
class TextConfig:
    word_dim: int = 64
    sentence_dim: int = 128
    cond_dim: int = 128
    pretrained_embeddings: Optional[str] = None


@dataclass
class MartConfig:
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    num_memory_cells: int = 3
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    max_seq_len: int = 24
    intermediate_size: Optional[int] = None

    def validate(self):
        for name in ("hidden_size", "num_layers", "num_heads", "num_memory_cells", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"mart.{name} must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"mart.hidden_size ({self.hidden_size}) must be divisible by mart.num_heads ({self.num_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("mart.dropout must be in [0, 1)")


@dataclass
class ContextConfig:
    gist_channels: int = 64
    gist_signal_dim: int = 32
    gru_dim: int = 64
    use_memory_init: bool = True


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    feature_grid: int = 4
    use_copy_transform: bool = True


@dataclass
class DiscriminatorConfig:
    base_channels: int = 32


@dataclass
class CaptionerConfig:
    region_dim: int = 128
    variant: str = "mart_video"
    max_epochs: int = 30
    patience: int = 3
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class ClassifierConfig:
    feature_dim: int = 128
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    threshold: float = 0.5


@dataclass
class DamsmConfig:
    embed_dim: int = 128
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    story_gamma: float = 15.0
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 120
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    image_batch_size: int = 20
    story_batch_size: int = 4
    generator_updates: int = 2
    lambda_dual: float = 1.0
    lambda_char: float = 1.0
    checkpoint_every: int = 10
    steps_per_epoch: Optional[int] = None
    max_steps: Optional[int] = None

    def validate(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("train.lr_g and train.lr_d must be positive")
        if self.image_batch_size < 1 or self.story_batch_size < 1:
            raise ConfigError("train batch sizes must be >= 1")
        if self.generator_updates < 1 or self.epochs < 1:
            raise ConfigError("train.generator_updates and train.epochs must be >= 1")
        if self.lr_decay_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("train.lr_decay_every and train.checkpoint_every must be >= 1")


@dataclass
class EvalConfig:
    split: str = "val"
    num_negatives: int = 4
    r_precision_runs: int = 10
    r_precision_mismatches: int = 99


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    data: SynthConfig = field(default_factory=SynthConfig)
    text: TextConfig = field(default_factory=TextConfig)
    mart: MartConfig = field(default_factory=MartConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    damsm: DamsmConfig = field(default_factory=DamsmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        self.data.validate()
        self.mart.validate()
        self.train.validate()
        if self.captioner.variant not in DUAL_VARIANTS:
            raise ConfigError(
                f"captioner.variant must be one of {DUAL_VARIANTS}, got {self.captioner.variant!r}"
            )
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        if not 1 <= self.generator.feature_grid <= self.data.image_size // 2:
            raise ConfigError(
                f"generator.feature_grid must be in [1, {self.data.image_size // 2}], got {self.generator.feature_grid}"
            )
        return self

    def to_dict(self):
        return asdict(self)

    def model_hash(self):
        """Hash of every section that shapes a trained parameter tensor."""
        shaping = {
            "data": {k: getattr(self.data, k) for k in ("story_length", "image_size", "max_caption_len", "num_characters")},
            "text": asdict(self.text),
            "mart": asdict(self.mart),
            "context": asdict(self.context),
            "generator": asdict(self.generator),
            "discriminator": asdict(self.discriminator),
        }
        shaping["text"].pop("pretrained_embeddings")
        canonical = json.dumps(shaping, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


SECTIONS = {
    "data": SynthConfig,
    "text": TextConfig,
    "mart": MartConfig,
    "context": ContextConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "captioner": CaptionerConfig,
    "classifier": ClassifierConfig,
    "damsm": DamsmConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# Paper-scale values; desk values are the dataclass defaults.
_PAPER_PRESET = {
    "data": {"image_size": 64},
    "text": {"word_dim": 300},
    "mart": {"hidden_size": 192, "num_heads": 6},
    "generator": {"base_channels": 64, "feature_grid": 8},
    "discriminator": {"base_channels": 64},
    "captioner": {"region_dim": 2048},
}


def preset_dict(preset):
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    base = RunConfig(preset=preset).to_dict()
    if preset == "paper":
        _merge(base, _PAPER_PRESET, path="")
    return base


def _merge(target, update, path):
    for key, value in update.items():
        dotted = f"{path}.{key}" if path else key
        if key not in target:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(target[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a mapping")
            _merge(target[key], value, dotted)
        else:
            target[key] = value


def parse_override(text):
    """Turn ``a.b=value`` into a nested dict; values are parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key.path=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested = value
    for key in reversed(dotted.strip().split(".")):
        nested = {key: nested}
    return nested


def from_dict(data):
    """Build a validated ``RunConfig`` from a complete nested dict."""
    data = copy.deepcopy(data)
    kwargs = {}
    for f in fields(RunConfig):
        if f.name not in data:
            continue
        value = data.pop(f.name)
        if f.name in SECTIONS:
            section_cls = SECTIONS[f.name]
            known = {sf.name for sf in fields(section_cls)}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"unknown config key: {f.name}.{sorted(unknown)[0]}")
            value = section_cls(**value)
        kwargs[f.name] = value
    if data:
        raise ConfigError(f"unknown config key: {sorted(data)[0]}")
    return RunConfig(**kwargs).validate()


def load_config(path=None, preset=None, overrides=(), output_dir=None, seed=None):
    """Preset, then file, then ``--set`` overrides; flags always win."""
    file_data = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    chosen = preset or file_data.get("preset", "desk")
    merged = preset_dict(chosen)
    file_data = dict(file_data)
    file_data.pop("preset", None)
    _merge(merged, file_data, path="")
    for text in overrides:
        _merge(merged, parse_override(text), path="")
    merged["preset"] = chosen
    if output_dir is not None:
        merged["output_dir"] = output_dir
    if seed is not None:
        merged["seed"] = seed
    return from_dict(merged)
