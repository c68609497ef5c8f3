"""Layered run configuration: built-in defaults < config file < command-line flags."""
import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .synth import DEFAULT_OPS, FAMILIES
from .teacher import TeacherSpec
from .training import TrainConfig


def _dataclass_defaults(cls, skip=()):
    inst = cls() if cls is not TeacherSpec else TeacherSpec()
    return {f.name: copy.deepcopy(getattr(inst, f.name)) for f in fields(cls) if f.name not in skip}


def defaults() -> dict:
    train = _dataclass_defaults(TrainConfig, skip=("loss", "blocks_per_stage"))
    # desk-scale defaults for the synthetic benchmark
    train.update(epochs=20, batch_size=8)
    return {
        "teacher": _dataclass_defaults(TeacherSpec),
        "student": {"blocks_per_stage": 1},
        "loss": _dataclass_defaults(LossConfig),
        "train": train,
        "data": {"root": "bench", "holdout": None},
        "eval": {"k": 4, "support_mode": "random", "trials": 5, "seeds": None, "score_reduce": "mean"},
        "synth": {"seed": 1, "families": list(FAMILIES), "ops": dict(DEFAULT_OPS), "image_size": 32,
                  "train_normal": 60, "test_normal": 30, "test_abnormal": 30, "noise_level": 0.03,
                  "jitter": 1.0, "illumination": 0.1},
        "run": {"out": "runs/default", "workers": 1},
    }


FREE_FORM = {("synth", "ops")}


def check_keys(given: dict, reference: dict, prefix=""):
    if not isinstance(given, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
    for k, v in given.items():
        path = f"{prefix}.{k}" if prefix else str(k)
        if k not in reference:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(reference[k], dict) and tuple(path.split(".")) not in FREE_FORM:
            check_keys(v, reference[k], path)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML/JSON: {err}") from None
    check_keys(data, defaults())
    return data


def effective_config(config_path=None, overrides=None) -> dict:
    """Defaults, then the file, then flag overrides (``{"train": {"k": 2}, ...}``)."""
    cfg = defaults()
    if config_path:
        cfg = merge(cfg, load_config_file(config_path))
    if overrides:
        check_keys(overrides, cfg)
        cfg = merge(cfg, overrides)
    return cfg


def teacher_spec(cfg: dict) -> TeacherSpec:
    return TeacherSpec(**cfg["teacher"])


def train_config(cfg: dict) -> TrainConfig:
    try:
        loss = LossConfig(**cfg["loss"])
        return TrainConfig(**cfg["train"], blocks_per_stage=cfg["student"]["blocks_per_stage"], loss=loss)
    except TypeError as err:
        raise ConfigError(str(err)) from None
