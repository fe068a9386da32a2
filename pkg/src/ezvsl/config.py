"""Line-oriented ``key = value`` configuration with typed, documented defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Mapping

from .tensorio import config_hash


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # dataset
    seed: int = 0
    n_classes: int = 8
    n_train: int = 2000
    n_test: int = 500
    max_shapes: int = 3
    img_size: int = 64
    noise_level: float = 0.05
    annotators: int = 1
    heard_fraction: float = 1.0
    sample_rate: int = 8000
    clip_seconds: float = 1.0
    # audio frontend
    n_fft: int = 128
    hop: int = 64
    # objectness pre-training
    obj_epochs: int = 6
    obj_lr: float = 2e-3
    # audio-visual training
    dim: int = 64
    tau: float = 0.07
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    matching_strategy: str = "max_of_sim"
    init_visual: str = "objectness"
    permute_pairs: bool = False
    # inference / evaluation
    alpha: float = 0.4
    theta: float = 0.5
    map_source: str = "fused"
    eval_split: str = "test"
    baseline_reps: int = 100
    # files, relative to the workdir
    data_dir: str = "data"
    objectness_ckpt: str = "objectness.ezvl"
    checkpoint: str = "model.ezvl"
    out_dir: str = "out"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must be in (0, 1)")
        if not 0.0 < self.heard_fraction <= 1.0:
            raise ConfigError("heard_fraction must be in (0, 1]")
        if self.matching_strategy not in ("max_of_sim", "avg_of_sim", "sim_of_maxpool"):
            raise ConfigError(f"unknown matching_strategy {self.matching_strategy!r}")
        if self.init_visual not in ("objectness", "random"):
            raise ConfigError("init_visual must be 'objectness' or 'random'")
        if self.map_source not in ("avl", "ogl-l1", "ogl-cls", "fused", "fused-cls"):
            raise ConfigError(f"unknown map_source {self.map_source!r}")
        if self.max_shapes < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("max_shapes, n_train and n_test must be >= 1")

    # keys whose values change what training produces
    TRAIN_KEYS = (
        "seed n_classes n_train max_shapes img_size noise_level heard_fraction sample_rate "
        "clip_seconds n_fft hop obj_epochs obj_lr dim tau batch_size lr beta1 beta2 epochs "
        "matching_strategy init_visual permute_pairs"
    ).split()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def train_hash(self) -> str:
        return config_hash("".join(f"{k} = {_fmt(getattr(self, k))}\n" for k in self.TRAIN_KEYS))

    def full_hash(self) -> str:
        return config_hash(self.to_text())

    def override(self, values: Mapping[str, object]) -> "Config":
        return replace(self, **_coerce_all(values))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if kind == "bool":
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind == "int":
            return int(s)
        if kind == "float":
            return float(s)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {s!r} as {kind}") from e
    return s


def _coerce_all(values: Mapping[str, object]) -> Dict[str, object]:
    return {k: _coerce(k, v) for k, v in values.items()}


def parse_text(text: str) -> Dict[str, str]:
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip()
        if k not in _TYPES:
            raise ConfigError(f"line {ln}: unknown config key {k!r}")
        out[k] = v.strip()
    return out


def resolve(path=None, overrides: Iterable[str] = (), env=None) -> Config:
    """Defaults, then the config file, then ``key=value`` overrides, then ``EZVSL_SEED``."""
    values: Dict[str, str] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    env = os.environ if env is None else env
    if env.get("EZVSL_SEED"):
        values["seed"] = env["EZVSL_SEED"]
    return Config().override(values)
