"""Run configuration: dataclasses, presets and the INI-style config file.

Config files use ``configparser`` syntax with sections ``[run]``, ``[gen]``,
``[model]``, ``[train]`` and ``[eval]``. Every key is optional; unknown
sections or keys are rejected rather than ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    num_users: int = 2000
    num_items: int = 5000
    impressions_per_user: int = 215
    test_impressions_per_user: int = 40
    clickbait_fraction: float = 0.2
    duration_threshold: float = 50.0
    negative_ratio: int = 4
    negative_smoothing: float = 1.0
    latent_dim: int = 8
    ctr_scale: float = 4.0
    ctr_bias: float = -4.0
    cvr_scale: float = 0.4
    cvr_bias: float = 0.2
    cvr_item_quality_std: float = 0.3
    clickbait_ctr_boost: float = 1.5
    clickbait_cvr_penalty: float = 1.0
    long_log_mean: float = 4.6
    long_log_std: float = 0.8
    short_log_mean: float = 3.0
    short_log_std: float = 0.6
    user_clusters: int = 20
    item_clusters: int = 50
    cluster_spread: float = 0.5
    quality_cluster_share: float = 0.5
    num_publishers: int = 100
    publisher_bait_signal: float = 0.3
    noise_cardinality: int = 20
    dense_noise_std: float = 1.0
    seed: int = 0

    def validate(self):
        for key in ("num_users", "num_items", "impressions_per_user", "latent_dim",
                    "user_clusters", "item_clusters", "num_publishers", "noise_cardinality"):
            if getattr(self, key) < 1:
                raise ConfigError(f"gen.{key} must be >= 1, got {getattr(self, key)}")
        if self.test_impressions_per_user < 0:
            raise ConfigError("gen.test_impressions_per_user must be >= 0")
        if not 0.0 <= self.clickbait_fraction <= 1.0:
            raise ConfigError(f"gen.clickbait_fraction must be in [0, 1], got {self.clickbait_fraction}")
        if self.negative_ratio < 0:
            raise ConfigError("gen.negative_ratio must be >= 0")
        if self.negative_smoothing < 0:
            raise ConfigError("gen.negative_smoothing must be >= 0")
        if self.duration_threshold <= 0:
            raise ConfigError("gen.duration_threshold must be > 0")
        for key in ("cluster_spread", "quality_cluster_share"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"gen.{key} must be in [0, 1], got {getattr(self, key)}")
        for key in ("long_log_std", "short_log_std", "dense_noise_std", "cvr_item_quality_std"):
            if getattr(self, key) < 0:
                raise ConfigError(f"gen.{key} must be >= 0")
        return self


PRESETS = {
    "desk": dict(expert_sizes=(64, 32), head_sizes=(32, 16), tower_sizes=(64, 32), num_experts=2),
    "paper": dict(expert_sizes=(1024, 512, 256), head_sizes=(256, 256), tower_sizes=(512, 256, 128),
                  num_experts=2),
}


@dataclass
class ModelConfig:
    """Layer widths. ``expert_sizes`` and ``tower_sizes`` end with the output width;
    ``head_sizes`` are hidden widths (the head always ends in one logit)."""

    preset: str = "desk"
    embedding_dim: int = 30
    num_experts: int = 2
    expert_sizes: tuple[int, ...] = (64, 32)
    head_sizes: tuple[int, ...] = (32, 16)
    tower_sizes: tuple[int, ...] = (64, 32)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {name!r}")
        return cls(preset=name, **{**PRESETS[name], **overrides})

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.num_experts < 1:
            raise ConfigError("model.num_experts must be >= 1")
        if self.embedding_dim < 1:
            raise ConfigError("model.embedding_dim must be >= 1")
        for key in ("expert_sizes", "tower_sizes"):
            sizes = getattr(self, key)
            if not sizes or min(sizes) < 1:
                raise ConfigError(f"model.{key} must be a non-empty list of positive ints")
        if self.head_sizes and min(self.head_sizes) < 1:
            raise ConfigError("model.head_sizes must be positive ints")
        return self


@dataclass
class TrainConfig:
    w1: float = 1.0
    w2: float = 1.0
    batch_size: int = 256
    epochs: int = 3
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    duration_threshold: float = 50.0
    temperature: float = 1.0
    paper_literal_click_label: bool = False
    paper_literal_kl: bool = False
    seed: int = 0

    def validate(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("train.w1 and train.w2 must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.temperature <= 0:
            raise ConfigError("train.temperature must be > 0")
        return self


@dataclass
class EvalConfig:
    k: int = 100
    num_cells: int = 64
    nprobe: int = 8
    kmeans_iters: int = 20
    sampled_serving: bool = False

    def validate(self):
        for key in ("k", "num_cells", "nprobe", "kmeans_iters"):
            if getattr(self, key) < 1:
                raise ConfigError(f"eval.{key} must be >= 1")
        return self


@dataclass
class RunSection:
    seed: int = 7
    num_seeds: int = 5
    output_dir: str = ""
    models: tuple[str, ...] = ("dmtl", "regression", "classification", "click")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        unknown = set(self.run.models) - {"dmtl", "regression", "classification", "click"}
        if unknown:
            raise ConfigError(f"run.models has unknown entries {sorted(unknown)}")
        if self.run.num_seeds < 1:
            raise ConfigError("run.num_seeds must be >= 1")
        self.gen.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.gen.duration_threshold != self.train.duration_threshold:
            raise ConfigError("gen.duration_threshold and train.duration_threshold must agree")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every stage seeded from ``seed``."""
        cfg = dataclasses.replace(
            self,
            run=dataclasses.replace(self.run, seed=seed),
            gen=dataclasses.replace(self.gen, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )
        return cfg


SECTIONS = ("run", "gen", "model", "train", "eval")
# Seeds are set from [run] seed; the per-stage copies are not user keys.
_HIDDEN = {"gen": {"seed"}, "train": {"seed"}}


def _parse_value(raw: str, tp, keypath: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            (inner,) = {a for a in typing.get_args(tp) if a is not Ellipsis}
            items = [s for s in raw.replace(",", " ").split() if s]
            return tuple(_parse_value(s, inner, keypath) for s in items)
    except ValueError:
        raise ConfigError(f"{keypath}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{keypath}: unsupported type {tp}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    cfg = RunConfig()
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section(s): {unknown}")
    model_keys = dict(parser["model"]) if parser.has_section("model") else {}
    if "preset" in model_keys:
        cfg.model = ModelConfig.from_preset(model_keys["preset"].strip())
    for section in SECTIONS:
        if not parser.has_section(section):
            continue
        obj = getattr(cfg, section)
        hints = typing.get_type_hints(type(obj))
        names = {f.name for f in dataclasses.fields(obj)} - _HIDDEN.get(section, set())
        for key, raw in parser[section].items():
            keypath = f"{section}.{key}"
            if key not in names:
                raise ConfigError(f"unknown config key {keypath}")
            setattr(obj, key, _parse_value(raw, hints[key], keypath))
    if "duration_threshold" in dict(parser["gen"] if parser.has_section("gen") else {}) and not (
        parser.has_section("train") and "duration_threshold" in parser["train"]
    ):
        cfg.train.duration_threshold = cfg.gen.duration_threshold
    cfg.validate()
    return cfg.with_seed(cfg.run.seed)


def load_config(path=None) -> RunConfig:
    """Parse, default and validate a config file; ``None`` or an empty file gives defaults."""
    if path is None:
        return loads_config("")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return loads_config(p.read_text())


def dumps_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {
            f.name: _format_value(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if f.name not in _HIDDEN.get(section, set())
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path):
    Path(path).write_text(dumps_config(cfg))
