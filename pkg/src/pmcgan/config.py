"""Run configuration: INI file with one level of sections, flag overrides and asset-path env vars."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .cascade import ModelSpec, TrainSchedule
from .errors import ConfigError
from .evaluation import INCEPTION_WEIGHTS_ENV
from .losses import VGG_WEIGHTS_ENV, LossWeights
from .networks import GeneratorSpec

SNAPSHOT_NAME = "config.ini"

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "paths": {
        "data_root": "data",
        "split": "train",
        "eval_split": "val",
        "work_dir": "runs/default",
        "vgg_weights": "",
        "inception_weights": "",
    },
    "data": {"pedestrian_class": 24, "expansions": 1},
    "model": {
        "base_width": 64,
        "n_levels": 4,
        "msrb_per_level": 2,
        "carb_per_level": 2,
        "max_width": 256,
        "carb_reduction": 16,
        "latent_dim": 16,
        "leaky_slope": 0.2,
        "d_width": 64,
        "d_layers": 3,
        "e_width": 64,
        "e_blocks": 4,
    },
    "train": {
        "total_stages": 3,
        "epochs_per_stage": 200,
        "batch_size": 1,
        "base_lr": 2e-4,
        "w": 0.01,
        "beta1": 0.5,
        "beta2": 0.999,
        "checkpoint_every": 10,
    },
    "loss": {
        "lambda_l1": 10.0,
        "lambda_latent": 0.5,
        "lambda_kl": 0.01,
        "lambda_vgg": 1.0,
        "use_vgg": True,
        "toy_vgg": False,
    },
    "eval": {"n_codes": 5, "n_samples": 5, "steps": 10, "toy_extractor": False, "toy_dim": 64},
    "augment": {"n_images": 3000, "stage2_from": 96, "stage3_from": 192, "n_bins": 16},
}

ENV_OVERRIDES = {
    ("paths", "vgg_weights"): VGG_WEIGHTS_ENV,
    ("paths", "inception_weights"): INCEPTION_WEIGHTS_ENV,
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    source: str = ""

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def work_dir(self) -> Path:
        return Path(self.values["paths"]["work_dir"])

    def path(self, key: str) -> Path:
        return Path(self.values["paths"][key])

    def generator_spec(self) -> GeneratorSpec:
        names = {f.name for f in fields(GeneratorSpec)} - {"stage", "in_channels"}
        return GeneratorSpec(**{k: v for k, v in self.values["model"].items() if k in names})

    def model_spec(self) -> ModelSpec:
        m = self.values["model"]
        return ModelSpec(self.generator_spec(), m["d_width"], m["d_layers"], m["e_width"], m["e_blocks"])

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(**self.values["train"])

    def loss_weights(self) -> LossWeights:
        v = {k: val for k, val in self.values["loss"].items() if k != "toy_vgg"}
        try:
            return LossWeights(**v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def thresholds(self) -> tuple[int, int]:
        a = self.values["augment"]
        return a["stage2_from"], a["stage3_from"]

    def to_parser(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser()
        for section, items in self.values.items():
            parser[section] = {k: str(v) for k, v in items.items()}
        return parser

    def write_snapshot(self, directory: str | Path) -> Path:
        path = Path(directory) / SNAPSHOT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            self.to_parser().write(fh)
        return path


def _apply(values: dict, section: str, key: str, raw: str, origin: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}]")
    values[section][key] = _coerce(section, key, raw)


def parse_override(item: str) -> tuple[str, str, str]:
    name, sep, value = item.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    return section, key, value.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None,
                environ: dict | None = None) -> RunConfig:
    """Defaults < config file < asset env vars < ``section.key=value`` overrides < ``--seed``."""
    environ = os.environ if environ is None else environ
    values = {s: dict(items) for s, items in DEFAULTS.items()}
    source = ""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser[section].items():
                _apply(values, section, key, raw, str(path))
        source = str(path)
    for (section, key), var in ENV_OVERRIDES.items():
        if environ.get(var):
            values[section][key] = environ[var]
    for item in overrides:
        section, key, raw = parse_override(item)
        _apply(values, section, key, raw, "--set")
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(values, source)
