"""Flat ``key = value`` experiment configs with dotted keys.

Example::

    kind = mog
    seed = 0
    [trainer]
    stepper = rk4
    lambda = 0.07
    step_schedule = [[0, 0.03]]

Values are parsed as JSON where possible (numbers, lists, true/false/null),
otherwise kept as bare strings. ``[section]`` headers prefix the keys that
follow. Precedence when merging: command line > file > defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

OUTPUT_ENV = "ODEGAN_OUTPUT_DIR"
KINDS = ("toy", "order-test", "linear-probe", "mog", "eigen-check", "reg-sweep")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "output_dir": None,
    # toy rotational game
    "toy.epsilon": 0.1,
    "toy.h": 0.2,
    "toy.steps": 200,
    "toy.init": [1.0, 1.0],
    "toy.steppers": ["euler", "heun"],
    "toy.min_ratio": {"euler": 3.0},
    "toy.max_ratio": {"heun": 0.3},
    # order of accuracy
    "order.epsilon": 0.1,
    "order.T": 4.0,
    "order.init": [1.0, 1.0],
    "order.h_values": [0.2, 0.1, 0.05, 0.025],
    "order.steppers": ["euler", "heun", "rk4", "embedded23"],
    "order.expected": {"euler": [1.0, 0.2], "heun": [2.0, 0.3], "rk4": [4.0, 0.5], "embedded23": [3.0, 0.4]},
    # GAN game
    "game.latent_dim": 32,
    "game.batch_size": 512,
    "game.hidden": [25, 25],
    "game.activation": "relu",
    "game.slope": 0.2,
    "game.d_seed": 1,
    "game.g_seed": 2,
    "game.grid_side": 4,
    "game.grid_spacing": 1.0,
    "game.means": None,
    "game.std": 0.05,
    "game.alpha": 1.0,
    "game.beta": 1.0,
    # trainer
    "trainer.stepper": "rk4",
    "trainer.a": 1.0,
    "trainer.b": 1.0,
    "trainer.gamma": None,
    "trainer.beta1": 0.9,
    "trainer.beta2": 0.999,
    "trainer.eps": 1e-8,
    "trainer.h": 0.03,
    "trainer.step_schedule": None,
    "trainer.lambda": 0.07,
    "trainer.max_iterations": 18000,
    "trainer.log_every": 1,
    "trainer.track_embedded_error": False,
    "trainer.coverage_every": 1000,
    "trainer.coverage_samples": 2000,
    # mog thresholds
    "mog.final_samples": 10000,
    "mog.gap_threshold": 0.15,
    "mog.min_coverage": 0.875,
    "mog.final_window": 1000,
    "mog.settle_window": 500,
    "mog.compare_stepper": None,
    # regularisation sweep
    "sweep.lambdas": [0.0, 0.01, 0.07],
    "sweep.window_start": 0,
    "sweep.parallel": 1,
    # eigen checks
    "eigen.trials": 100,
    "eigen.dim": 10,
    "eigen.psd_states": 20,
    "eigen.psd_tol": 1e-6,
    "eigen.train_iterations": 300,
    # linear probe
    "linear.a": None,
    "linear.b": None,
    "linear.c": None,
    "linear.tol": 1e-8,
}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[f"{section}.{key}" if section else key] = parse_value(value)
    return out


def load_file(path) -> dict[str, object]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(p))


def parse_overrides(items) -> dict[str, object]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


@dataclass
class ExperimentConfig:
    kind: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def output_dir(self, cli_value=None) -> Path:
        for candidate in (cli_value, os.environ.get(OUTPUT_ENV), self.values.get("output_dir")):
            if candidate:
                return Path(candidate)
        return Path("runs") / self.kind

    def echo(self) -> dict:
        return {"kind": self.kind, **{k: self.values[k] for k in sorted(self.values)}}


def build(kind: str | None, file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    values = dict(DEFAULTS)
    merged = {**(file_values or {}), **(overrides or {})}
    file_kind = merged.pop("kind", None)
    kind = kind or file_kind
    if kind is None:
        raise ConfigError("experiment kind missing")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    unknown = sorted(k for k in merged if k not in DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values.update(merged)
    return ExperimentConfig(kind, values)
