"""Experiment configuration: TOML files with sections [data], [model], [proxy],
[stage.pretrain], [stage.init], [stage.prepare], [stage.adapt], [eval].

Precedence is flag overrides > file values > defaults. Unknown keys are hard
errors naming the offending dotted key. A resolved config snapshots to JSON
(config.json in the run directory) and can be loaded back with --config, which
makes any run reconstructible from its own artifacts.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources

import tomli

from .data.synthetic import SHIFT_PRESETS
from .data.types import SceneConfig, ShiftConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .model import ModelConfig
from .pipeline import StageConfig


@dataclass
class DataSection:
    height: int = 64
    width: int = 64
    depth_min: float = 1.0
    depth_max: float = 10.0
    min_objects: int = 4
    max_objects: int = 9
    density: float = 0.05
    strategy: str = "uniform"
    n_source: int = 200
    n_source_eval: int = 100
    n_target: int = 200
    seed: int = 0
    shift: str = "strong"
    shift_params: dict = field(default_factory=dict)
    source_dir: str = "data/source"
    source_eval_dir: str = "data/source_eval"
    target_dir: str = "data/target"


@dataclass
class ModelSection:
    image_channels: list = field(default_factory=lambda: [16, 32, 64])
    depth_channels: list = field(default_factory=lambda: [16, 32, 64])
    fusion_width: int = 64
    decoder_widths: list = field(default_factory=lambda: [64, 32, 16])
    use_batch_norm: bool = True
    adaptation_channels: int = 8
    output_scale: float = 12.0


@dataclass
class ProxySection:
    embed_dim: int = 128
    hidden_dim: int = 128
    tau: float = 0.996


@dataclass
class StageSection:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    inner_iter: int = 1
    w_z: float = 1.0
    w_sm: float = 1.0
    w_proxy: float = 1.0
    update_bn_stats: bool = True
    teacher_tau: float = 0.999
    consistency_weight: float = 1.0


@dataclass
class EvalSection:
    depth_min: float = 0.0
    depth_max: float = 80.0
    densities: list = field(default_factory=lambda: [0.01, 0.05, 0.10])
    batch_size: int = 16


_STAGE_DEFAULTS = {
    "pretrain": {"learning_rate": 1.5e-3, "epochs": 16, "batch_size": 16},
    "init": {"learning_rate": 1e-3, "epochs": 6, "batch_size": 16},
    "prepare": {"learning_rate": 1e-3, "epochs": 6, "batch_size": 48},
    "adapt": {
        "learning_rate": 5e-3,
        "epochs": 1,
        "batch_size": 16,
        "inner_iter": 1,
        "w_z": 1.0,
        "w_sm": 0.3,
        "w_proxy": 0.3,
    },
}


@dataclass
class ExperimentConfig:
    data: DataSection
    model: ModelSection
    proxy: ProxySection
    stages: dict  # name -> StageSection
    eval: EvalSection

    # -- section -> runtime objects -------------------------------------

    def scene_config(self):
        d = self.data
        return SceneConfig(
            height=d.height,
            width=d.width,
            depth_min=d.depth_min,
            depth_max=d.depth_max,
            min_objects=d.min_objects,
            max_objects=d.max_objects,
            density=d.density,
            strategy=d.strategy,
        )

    def shift_config(self):
        d = self.data
        if d.shift == "custom":
            base = {}
        else:
            if d.shift not in SHIFT_PRESETS:
                raise ConfigurationError(
                    f"unknown shift preset {d.shift!r}; available: {sorted(SHIFT_PRESETS)} or 'custom'"
                )
            base = dataclasses.asdict(SHIFT_PRESETS[d.shift])
        known = {f.name for f in dataclasses.fields(ShiftConfig)}
        for key in d.shift_params:
            if key not in known:
                raise ConfigurationError(f"unknown key 'data.shift.{key}'")
        base.update(d.shift_params)
        return ShiftConfig(**base)

    def model_config(self):
        m = self.model
        return ModelConfig(
            height=self.data.height,
            width=self.data.width,
            image_channels=tuple(m.image_channels),
            depth_channels=tuple(m.depth_channels),
            fusion_width=m.fusion_width,
            decoder_widths=tuple(m.decoder_widths),
            use_batch_norm=m.use_batch_norm,
            adaptation_channels=m.adaptation_channels,
            output_scale=m.output_scale,
        )

    def stage_config(self, name, seed=None):
        if name not in self.stages:
            raise ConfigurationError(f"no [stage.{name}] section configured")
        s = self.stages[name]
        selector = "adaptation_only" if name in ("init", "adapt") else "all"
        return StageConfig(
            learning_rate=s.learning_rate,
            epochs=s.epochs,
            batch_size=s.batch_size,
            inner_iter=s.inner_iter,
            weights=LossWeights(s.w_z, s.w_sm, s.w_proxy),
            selector=selector,
            seed=self.data.seed if seed is None else seed,
            update_bn_stats=s.update_bn_stats,
            teacher_tau=s.teacher_tau,
            consistency_weight=s.consistency_weight,
        )

    def eval_range(self):
        return (self.eval.depth_min, self.eval.depth_max)

    def as_dict(self):
        return {
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "proxy": dataclasses.asdict(self.proxy),
            "stage": {k: dataclasses.asdict(v) for k, v in self.stages.items()},
            "eval": dataclasses.asdict(self.eval),
        }


def _build_section(cls, mapping, prefix):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in known:
            raise ConfigurationError(f"unknown key '{prefix}.{key}'")
    return cls(**mapping)


def config_from_mapping(mapping):
    mapping = dict(mapping)
    known_sections = {"data", "model", "proxy", "stage", "eval"}
    for key in mapping:
        if key not in known_sections:
            raise ConfigurationError(f"unknown key '{key}'")

    data_map = dict(mapping.get("data", {}))
    shift_params = data_map.pop("shift", None)
    if isinstance(shift_params, dict):
        # [data.shift] table: explicit parameters, preset name optional inside.
        preset = shift_params.pop("preset", "custom")
        data_map["shift"] = preset
        data_map["shift_params"] = shift_params
    elif shift_params is not None:
        data_map["shift"] = shift_params

    data = _build_section(DataSection, data_map, "data")
    model = _build_section(ModelSection, dict(mapping.get("model", {})), "model")
    proxy = _build_section(ProxySection, dict(mapping.get("proxy", {})), "proxy")
    eval_sec = _build_section(EvalSection, dict(mapping.get("eval", {})), "eval")

    stage_maps = mapping.get("stage", {})
    if not isinstance(stage_maps, dict):
        raise ConfigurationError("'stage' must be a table of stage sections")
    stages = {}
    for name, defaults in _STAGE_DEFAULTS.items():
        merged = dict(defaults)
        merged.update(stage_maps.get(name, {}))
        unknown = set(stage_maps.get(name, {})) - {f.name for f in dataclasses.fields(StageSection)}
        if unknown:
            raise ConfigurationError(f"unknown key 'stage.{name}.{sorted(unknown)[0]}'")
        stages[name] = StageSection(**merged)
    for name in stage_maps:
        if name not in _STAGE_DEFAULTS:
            raise ConfigurationError(f"unknown key 'stage.{name}'")

    return ExperimentConfig(data=data, model=model, proxy=proxy, stages=stages, eval=eval_sec)


def _read_config_file(path):
    if not os.path.isfile(path):
        packaged = _packaged_preset(path)
        if packaged is not None:
            return packaged
        raise ConfigurationError(f"config file not found: {path}")
    try:
        if path.endswith(".json"):
            with open(path) as fh:
                doc = json.load(fh)
            # Accept run-directory snapshots transparently.
            return doc.get("config", doc)
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc


def _packaged_preset(path):
    """Resolve 'presets/<name>.toml' against the presets shipped in the package."""
    name = os.path.basename(path)
    if not name.endswith(".toml"):
        return None
    try:
        ref = resources.files("proxytta").joinpath("presets", name)
        if ref.is_file():
            return tomli.loads(ref.read_text())
    except (FileNotFoundError, ModuleNotFoundError):
        return None
    return None


def parse_override(text):
    """Parse 'dotted.key=value'; values use TOML literal syntax, else string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override {text!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def apply_overrides(mapping, overrides):
    for text in overrides or []:
        key, value = parse_override(text)
        parts = key.split(".")
        node = mapping
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override key '{key}' descends into a non-table value")
        node[parts[-1]] = value
    return mapping


def load_config(path, overrides=None):
    mapping = _read_config_file(path)
    apply_overrides(mapping, overrides)
    return config_from_mapping(mapping)


def available_presets():
    try:
        root = resources.files("proxytta").joinpath("presets")
        return sorted(p.name for p in root.iterdir() if p.name.endswith(".toml"))
    except (FileNotFoundError, ModuleNotFoundError):
        return []
