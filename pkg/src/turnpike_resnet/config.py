"""Experiment configuration: an INI file with one section per concern.

Every key has a default (from the built-in recipe or the base table below);
unknown sections or keys are rejected.  ``effective_text`` renders the fully
resolved configuration so a run can be reproduced from it.
"""
from __future__ import annotations

import configparser
import io
import math

from .resnet import ACTIVATIONS, ARCHS
from .softce import SmoothingSpec
from .train import PENALTY_MODES, STAGE_MODES, ObjectiveSpec, TrainRun

DATASET_KINDS = ("two_spirals", "mnist")

# section -> key -> (type, default)
SCHEMA = {
    "dataset": {
        "kind": (str, "two_spirals"),
        "n_per_class": (int, 240),
        "noise_std": (float, 0.02),
        "turns": (float, 1.5),
        "r_max": (float, 1.0),
        "seed": (int, 0),
        "images_path": (str, ""),
        "labels_path": (str, ""),
        "limit": (int, 0),
    },
    "network": {
        "arch": (str, "bottleneck"),
        "depth": (int, 30),
        "state_dim": (int, 2),
        "hidden_dim": (int, 8),
        "activations": (str, "tanh,identity"),
    },
    "smoothing": {
        "p_d": (float, 0.95),
    },
    "objective": {
        "gamma": (float, 3.0),
        "reg_r": (float, 0.005),
        "stage_mode": (str, "soft_ce"),
        "penalty_mode": (str, "objective_term"),
        "terminal_loss": (str, "auto"),
    },
    "optimizer": {
        "lr": (float, 0.1),
        "epochs": (int, 2000),
        "batch_size": (int, 0),
        "seed": (int, 0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-8),
        "decay_biases": (bool, True),
    },
    "diagnostics": {
        # 0 selects 0.1 * |delta|
        "epsilon": (float, 0.0),
        "margin": (int, 2),
    },
    "output": {
        "dir": (str, "runs/experiment"),
    },
}

RECIPES = {
    "two-spirals": {
        # full-batch Adam at lr 0.1 oscillates with the default moments
        "optimizer": {"beta1": 0.95, "beta2": 0.99, "seed": 5},
        "output": {"dir": "runs/two-spirals"},
    },
    "mnist-subset": {
        "dataset": {"kind": "mnist", "limit": 2000},
        "network": {"arch": "bottleneck", "depth": 40, "state_dim": 784, "hidden_dim": 128,
                    "activations": "relu,identity"},
        "smoothing": {"p_d": 0.91},
        "objective": {"gamma": 1.0, "reg_r": 1e-5},
        "optimizer": {"lr": 1e-3, "epochs": 50, "batch_size": 100},
        "output": {"dir": "runs/mnist-subset"},
    },
}


class ConfigError(ValueError):
    pass


def _parse(section, key, raw):
    typ = SCHEMA[section][key][0]
    raw = raw.strip() if isinstance(raw, str) else raw
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


class ExperimentConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def build(cls, recipe=None, text=None, overrides=()):
        """Defaults, then recipe, then config text, then ``section.key=value`` overrides."""
        values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        if recipe is not None:
            if recipe not in RECIPES:
                raise ConfigError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
            for s, keys in RECIPES[recipe].items():
                values[s].update(keys)
        if text is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read_string(text)
            except configparser.Error as exc:
                raise ConfigError(f"malformed configuration: {exc}") from None
            for s in parser.sections():
                if s not in SCHEMA:
                    raise ConfigError(f"unknown section [{s}]")
                for k, v in parser.items(s):
                    if k not in SCHEMA[s]:
                        raise ConfigError(f"unknown key {k!r} in section [{s}]")
                    values[s][k] = _parse(s, k, v)
        for item in overrides:
            name, sep, raw = item.partition("=")
            s, dot, k = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if s not in SCHEMA or k not in SCHEMA[s]:
                raise ConfigError(f"unknown configuration key {name!r}")
            values[s][k] = _parse(s, k, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, recipe=None, overrides=()):
        with open(path, encoding="utf-8") as fh:
            return cls.build(recipe, fh.read(), overrides)

    def effective_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for s, keys in self.values.items():
            parser[s] = {k: _render(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def num_classes(self) -> int:
        return 2 if self["dataset"]["kind"] == "two_spirals" else 10

    @property
    def activations(self) -> tuple:
        return tuple(a.strip() for a in self["network"]["activations"].split(","))

    def smoothing(self) -> SmoothingSpec:
        return SmoothingSpec(self.num_classes, self["smoothing"]["p_d"])

    def objective_spec(self) -> ObjectiveSpec:
        o = self["objective"]
        return ObjectiveSpec(o["gamma"], o["reg_r"], o["stage_mode"], o["penalty_mode"],
                             o["terminal_loss"])

    def train_run(self) -> TrainRun:
        o = self["optimizer"]
        return TrainRun(self.objective_spec(), o["epochs"], o["lr"], o["batch_size"],
                        o["seed"], o["decay_biases"], o["beta1"], o["beta2"], o["epsilon"])

    def epsilon(self) -> float:
        eps = self["diagnostics"]["epsilon"]
        return eps if eps > 0 else 0.1 * abs(self.smoothing().delta)

    def validate(self):
        d, n, o = self["dataset"], self["network"], self["optimizer"]
        try:
            if d["kind"] not in DATASET_KINDS:
                raise ValueError(f"dataset kind must be one of {DATASET_KINDS}")
            if d["kind"] == "two_spirals":
                if d["n_per_class"] < 1:
                    raise ValueError("n_per_class must be >= 1")
                if d["noise_std"] < 0:
                    raise ValueError("noise_std must be nonnegative")
            elif not (d["images_path"] and d["labels_path"]):
                raise ValueError("mnist dataset needs images_path and labels_path")
            if d["limit"] < 0:
                raise ValueError("limit must be >= 0 (0 means no limit)")
            if n["arch"] not in ARCHS:
                raise ValueError(f"arch must be one of {ARCHS}")
            for a in self.activations:
                if a not in ACTIVATIONS:
                    raise ValueError(f"unknown activation {a!r}")
            if len(self.activations) != (1 if n["arch"] == "plain" else 2):
                raise ValueError(f"{n['arch']} architecture needs "
                                 f"{1 if n['arch'] == 'plain' else 2} activation(s)")
            if n["depth"] < 0:
                raise ValueError("depth must be >= 0")
            if n["state_dim"] < self.num_classes:
                raise ValueError(f"state_dim {n['state_dim']} < number of classes {self.num_classes}")
            if n["arch"] == "bottleneck" and n["hidden_dim"] < 1:
                raise ValueError("hidden_dim must be >= 1")
            self.smoothing()
            self.train_run()
            for key in ("beta1", "beta2"):
                if not 0 <= o[key] < 1:
                    raise ValueError(f"{key} must lie in [0, 1)")
            if not (o["epsilon"] > 0 and math.isfinite(o["epsilon"])):
                raise ValueError("optimizer epsilon must be positive")
            if self["diagnostics"]["epsilon"] < 0:
                raise ValueError("diagnostics epsilon must be >= 0")
            if self["diagnostics"]["margin"] < 0:
                raise ValueError("margin must be >= 0")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
