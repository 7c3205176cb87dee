"""Run configuration: a TOML file read as flat dotted keys, with command-line overrides.

Example::

    seed = 0
    data.path = "enron_edges.txt"
    model.structural_heads = [16]
    model.structural_sizes = [128]
    train.learning_rate = 1e-3
    eval.mode = "all-links"

Relative data paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evaluation import MODES
from .layers import ConfigError, ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig

OUTPUT_ENV = "DYSAT_OUTPUT_DIR"

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"input_dim"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)} - {"seed"}
_EVAL_DEFAULTS = {
    "mode": "all-links", "runs": 10, "horizon": 6, "start": 0, "val_fraction": 0.2,
    "train_fraction": 0.25, "classifier_l2": 1e-4, "downstream_only": False,
}
_DATA_KEYS = {"path", "features", "num_nodes"}


def known_keys() -> set[str]:
    keys = {"seed", "output.dir"}
    keys |= {f"model.{k}" for k in _MODEL_KEYS}
    keys |= {f"train.{k}" for k in _TRAIN_KEYS}
    keys |= {f"sampler.{k}" for k in _SAMPLER_KEYS}
    keys |= {f"eval.{k}" for k in _EVAL_DEFAULTS}
    keys |= {f"data.{k}" for k in _DATA_KEYS}
    return keys


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, name + "."))
        else:
            out[name] = v
    return out


def parse_value(text: str) -> Any:
    """A command-line ``key=value`` right-hand side, read as a TOML value when possible."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        values: dict[str, Any] = {}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            try:
                with open(p, "rb") as fh:
                    values = flatten(tomllib.load(fh))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {p}") from None
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from None
            base = p.resolve().parent
        values.update(overrides or {})
        unknown = sorted(set(values) - known_keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(values, base)
        cfg.validate()
        return cfg

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict[str, Any]:
        n = len(name) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(name + ".")}

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def model_config(self, input_dim: int) -> ModelConfig:
        try:
            return ModelConfig(input_dim=input_dim, **self.section("model"))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, **self.section("train"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def sampler_config(self) -> SamplerConfig:
        try:
            return SamplerConfig(seed=self.seed, **self.section("sampler"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def eval_options(self) -> dict[str, Any]:
        return {**_EVAL_DEFAULTS, **self.section("eval")}

    def data_path(self, key: str = "data.path") -> Path | None:
        raw = self.values.get(key)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self, flag: str | None = None) -> Path:
        """``--out`` flag, then the environment override, then ``output.dir``, then ``./dysat-out``."""
        chosen = flag or os.environ.get(OUTPUT_ENV) or self.values.get("output.dir") or "dysat-out"
        return Path(chosen)

    def validate(self) -> None:
        """Check everything that can be checked before the data is read."""
        # a placeholder input width: the real one comes from the features
        self.model_config(input_dim=1)
        self.train_config()
        self.sampler_config()
        ev = self.eval_options()
        if ev["mode"] not in MODES:
            raise ConfigError(f"eval.mode must be one of {MODES}, got {ev['mode']!r}")
        if int(ev["runs"]) < 1 or int(ev["horizon"]) < 1 or int(ev["start"]) < 0:
            raise ConfigError("eval.runs and eval.horizon must be positive, eval.start non-negative")
        for k in ("val_fraction", "train_fraction"):
            if not 0.0 < float(ev[k]) < 1.0:
                raise ConfigError(f"eval.{k} must lie in (0, 1)")
