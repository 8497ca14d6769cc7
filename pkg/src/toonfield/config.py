"""Run configuration: flat-section key-value files, strict and echoable.

Configs parse from a TOML-compatible subset (strings, numbers, booleans,
arrays; one table level). Every field is explicit after parsing: defaults are
materialized, unknown keys are errors, and the canonical echo regenerates a
file that parses back to the same config. The sha256 of the echo is the
config digest stored in checkpoints.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid, unknown, or out-of-range configuration content."""


@dataclass
class SceneConfig:
    alpha: float = 0.05
    smooth_union_k: float = 0.1
    instance_dim: int = 64
    feature_dim: int = 8


@dataclass
class CameraConfig:
    radius: float = 3.2
    fov: float = 0.7
    t_near: float = 1.6
    t_far: float = 4.8
    azimuth_range: list = field(default_factory=lambda: [-0.6, 0.6])
    elevation_range: list = field(default_factory=lambda: [-0.3, 0.3])


@dataclass
class RenderConfig:
    feature_resolution: int = 32
    image_resolution: int = 64
    samples_per_ray: int = 32


@dataclass
class StyleFieldConfig:
    hidden: int = 128
    layers: int = 4
    mapping_width: int = 128
    mapping_layers: int = 4
    embed_dim: int = 32
    omega_first: float = 30.0
    backbone: str = "siren"
    condition_on_instance: bool = True
    seed: int = 11


@dataclass
class DecoderConfig:
    channels: int = 384
    adapter_width: int = 64
    seed: int = 23


@dataclass
class DataConfig:
    num_instances: int = 24
    poses_per_instance: int = 4
    seed: int = 501


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 2
    learning_rate: float = 2e-3
    num_instances: int = 96
    poses_per_instance: int = 2
    holdout_instances: int = 8
    holdout_poses: int = 2
    checkpoint_every: int = 500
    seed: int = 77


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 8
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lambda_elastic: float = 0.01
    lambda_adv: float = 0.05
    elastic_eps: float = 0.1
    adversarial: bool = False
    adversarial_start_fraction: float = 0.5
    perceptual_proxy: str = "random-features"
    proxy_seed: int = 303
    elastic_points: int = 512
    elastic_batch_samples: int = 2
    elastic_uniform: bool = False
    checkpoint_every: int = 500
    compile: bool = True
    seed: int = 9000


@dataclass
class EvalConfig:
    holdout_pairs: int = 16
    deformation_points: int = 2048
    seed: int = 4242


@dataclass
class StyleConfig:
    kind: str = "identity"
    params: list = field(default_factory=list)
    recolor_matrix: list = field(default_factory=lambda: [[1.0, 0.0, 0.0],
                                                          [0.0, 1.0, 0.0],
                                                          [0.0, 0.0, 1.0]])
    recolor_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


_SECTION_TYPES = {
    "scene": SceneConfig,
    "camera": CameraConfig,
    "render": RenderConfig,
    "stylefield": StyleFieldConfig,
    "decoder": DecoderConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    stylefield: StyleFieldConfig = field(default_factory=StyleFieldConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    styles: list = field(default_factory=list)

    @property
    def num_styles(self) -> int:
        return len(self.styles)

    def validate(self) -> "RunConfig":
        if self.scene.instance_dim != 64:
            raise ConfigError("scene.instance_dim is fixed at 64")
        if self.scene.feature_dim != 8:
            raise ConfigError("scene.feature_dim is fixed at 8")
        if self.scene.alpha <= 0:
            raise ConfigError("scene.alpha must be positive")
        if not self.camera.t_near < self.camera.t_far:
            raise ConfigError("camera.t_near must be below camera.t_far")
        if self.render.samples_per_ray < 2:
            raise ConfigError("render.samples_per_ray must be at least 2")
        if self.stylefield.backbone not in ("siren", "relu-mlp"):
            raise ConfigError("stylefield.backbone must be 'siren' or 'relu-mlp'")
        if self.train.perceptual_proxy not in ("identity", "random-features"):
            raise ConfigError("train.perceptual_proxy must be 'identity' or 'random-features'")
        if not 0.0 <= self.train.adversarial_start_fraction <= 1.0:
            raise ConfigError("train.adversarial_start_fraction must lie in [0, 1]")
        for w in (self.train.lambda_elastic, self.train.lambda_adv, self.train.elastic_eps):
            if w < 0:
                raise ConfigError("loss weights must be non-negative")
        if not self.styles:
            raise ConfigError("at least one [style_N] section is required")
        for i, st in enumerate(self.styles):
            if st.kind not in ("identity", "anisotropic-scale", "twist", "radial-bulge"):
                raise ConfigError(f"style_{i}.kind {st.kind!r} is unknown")
            n = {"identity": 0, "anisotropic-scale": 3, "twist": 1, "radial-bulge": 2}[st.kind]
            if len(st.params) != n:
                raise ConfigError(f"style_{i}.params must have {n} entries for kind {st.kind!r}")
            if len(st.recolor_matrix) != 3 or any(len(r) != 3 for r in st.recolor_matrix):
                raise ConfigError(f"style_{i}.recolor_matrix must be 3x3")
            if len(st.recolor_bias) != 3:
                raise ConfigError(f"style_{i}.recolor_bias must have 3 entries")
        return self

    # -- canonical text form ------------------------------------------------

    def echo(self) -> str:
        out = []
        for name, cls in _SECTION_TYPES.items():
            out.append(f"[{name}]")
            section = getattr(self, name)
            for f in dc_fields(cls):
                out.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
            out.append("")
        for i, st in enumerate(self.styles):
            out.append(f"[style_{i}]")
            for f in dc_fields(StyleConfig):
                out.append(f"{f.name} = {_fmt(getattr(st, f.name))}")
            out.append("")
        return "\n".join(out)

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _build_section(cls, raw: dict, where: str):
    known = {f.name: f for f in dc_fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    section = cls()
    for key, value in raw.items():
        current = getattr(section, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            if isinstance(value, float) and value != int(value):
                raise ConfigError(f"{where}.{key} must be an integer")
            value = int(value)
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            value = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{key} must be a string")
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key} must be an array")
            value = _as_plain_list(value, f"{where}.{key}")
        setattr(section, key, value)
    return section


def _as_plain_list(value, where):
    out = []
    for v in value:
        if isinstance(v, list):
            out.append(_as_plain_list(v, where))
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where} must contain numbers only")
        else:
            out.append(float(v))
    return out


def config_from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    style_sections: dict[int, dict] = {}
    for key, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"top-level key {key!r} must be a section")
        if key in _SECTION_TYPES:
            setattr(cfg, key, _build_section(_SECTION_TYPES[key], value, key))
        elif key.startswith("style_"):
            try:
                idx = int(key.split("_", 1)[1])
            except ValueError:
                raise ConfigError(f"bad style section name {key!r}")
            style_sections[idx] = value
        else:
            raise ConfigError(f"unknown section [{key}]")
    if style_sections:
        expected = list(range(len(style_sections)))
        if sorted(style_sections) != expected:
            raise ConfigError("style sections must be style_0 .. style_{K-1} without gaps")
        cfg.styles = [_build_section(StyleConfig, style_sections[i], f"style_{i}")
                      for i in expected]
    return cfg.validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config: {e}")
    return config_from_dict(raw)


def default_styles() -> list[StyleConfig]:
    """Three-style default: vertical stretch, twist, bulge, distinct recolors."""
    return [
        StyleConfig(kind="anisotropic-scale", params=[1.0, 1.3, 1.0],
                    recolor_matrix=[[1.08, 0.05, 0.0], [0.03, 0.97, 0.02], [0.0, 0.02, 0.78]],
                    recolor_bias=[0.04, 0.01, 0.0]),
        StyleConfig(kind="twist", params=[0.5],
                    recolor_matrix=[[0.75, 0.03, 0.05], [0.02, 0.95, 0.06], [0.05, 0.08, 1.12]],
                    recolor_bias=[0.0, 0.01, 0.05]),
        StyleConfig(kind="radial-bulge", params=[0.15, 0.7],
                    recolor_matrix=[[0.6, 0.25, 0.15], [0.2, 0.65, 0.15], [0.15, 0.2, 0.6]],
                    recolor_bias=[0.05, 0.03, 0.02]),
    ]


def default_config() -> RunConfig:
    cfg = RunConfig(styles=default_styles())
    return cfg.validate()
