"""
Flat run configuration
======================
Runs are configured with flat ``key = value`` (or ``key: value``) files.  Values are
parsed as YAML scalars or flat lists of scalars; nested mappings are refused and so
is any key missing from ``watermark/ewe_params.yaml``, which holds the defaults.

All randomness derives from the single ``seed`` key through named sub-streams, see
``rng_stream``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from common.errors import ConfigError
from common.optim import OptimizerSettings

DEFAULTS_PATH = Path(__file__).resolve().parent.parent / "watermark" / "ewe_params.yaml"

_EQUALS = re.compile(r"^(\s*[A-Za-z_][\w\-]*)\s*=\s*(.*)$")


def parse_flat(text, source="<string>"):
    """Parse flat ``key = value`` / ``key: value`` text into a dict."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() and raw[0].isspace() and not raw.strip().startswith("#"):
            raise ConfigError(f"{source}:{lineno}: indented entries are not allowed (configuration is flat)")
        m = _EQUALS.match(raw)
        lines.append(f"{m.group(1)}: {m.group(2)}" if m else raw)
    try:
        data = yaml.safe_load("\n".join(lines))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: cannot parse configuration: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected key/value lines, got {type(data).__name__}")
    for key, value in data.items():
        _check_flat(key, value, source)
    return dict(data)


def _check_flat(key, value, source):
    if isinstance(value, dict):
        raise ConfigError(f"{source}: key {key!r} holds a nested mapping")
    if isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value):
        raise ConfigError(f"{source}: key {key!r} holds a nested list")


def load_flat(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    return parse_flat(text, source=str(path))


def load_defaults():
    return load_flat(DEFAULTS_PATH)


def parse_override(item):
    """``key=value`` from the command line."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parsed = parse_flat(f"{key.strip()}: {value.strip()}", source="--set")
    return next(iter(parsed.items()))


def merge(base, overrides, source="override"):
    merged = dict(base)
    for key, value in overrides.items():
        if key not in base:
            raise ConfigError(f"{source}: unknown key {key!r}")
        expected = base[key]
        if isinstance(expected, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        merged[key] = value
    return merged


@dataclass
class TrainConfig:
    """Knobs of one training loop (clean, baseline, ewe, extraction)."""

    kappa: float = 10.0
    temperature: float = 1.0
    temperature_scale: str = "median"   # absolute | median
    alpha: float = 0.1
    ratio: int = 2
    batch_size: int = 64
    epochs: int = 6
    warmup_epochs: int = 0              # leading epochs without watermark batches
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed: int = 0

    def validate(self):
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ConfigError(f"ratio r must be a positive integer, got {self.ratio}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if not self.temperature > 0:
            raise ConfigError(f"initial temperature must be positive, got {self.temperature}")
        if self.temperature_scale not in ("absolute", "median"):
            raise ConfigError(f"temperature_scale must be absolute or median, got {self.temperature_scale!r}")
        if self.alpha < 0:
            raise ConfigError(f"temperature learning rate must be nonnegative, got {self.alpha}")
        self.optimizer.validate()
        return self

    def with_(self, **changes):
        return replace(self, **changes)


class RunConfig:
    """Resolved configuration of one run: defaults, then a file, then ``--set`` items."""

    def __init__(self, values):
        self.values = dict(values)

    @classmethod
    def from_sources(cls, config_path=None, overrides=()):
        values = load_defaults()
        if config_path is not None:
            values = merge(values, load_flat(config_path), source=str(config_path))
        for item in overrides:
            key, value = parse_override(item)
            values = merge(values, {key: value}, source="--set")
        return cls(values)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown key {key!r}") from None

    def with_(self, **changes):
        return RunConfig(merge(self.values, changes))

    def snapshot(self):
        return dict(sorted(self.values.items()))

    @property
    def seed(self):
        return int(self["seed"])

    def optimizer(self):
        return OptimizerSettings(
            name=str(self["optimizer"]), lr=float(self["lr"]), beta1=float(self["beta1"]),
            beta2=float(self["beta2"]), eps=float(self["eps"]),
        ).validate()

    def train_config(self, epochs=None, kappa=None, warmup_epochs=None):
        """Victim training knobs; ``epochs`` for other loops (extraction, fine-tuning) implies no warm-up."""
        if warmup_epochs is None:
            warmup_epochs = int(self["warmup_epochs"]) if epochs is None else 0
        return TrainConfig(
            kappa=float(self["kappa"] if kappa is None else kappa),
            temperature=float(self["temperature"]),
            temperature_scale=str(self["temperature_scale"]),
            alpha=float(self["alpha"]),
            ratio=int(self["ratio"]),
            batch_size=int(self["batch_size"]),
            epochs=int(self["epochs"] if epochs is None else epochs),
            warmup_epochs=warmup_epochs,
            optimizer=self.optimizer(),
            seed=self.seed,
        ).validate()


def rng_stream(seed, name):
    """Independent generator for the named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]))
