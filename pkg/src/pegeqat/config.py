"""Experiment configuration.

Config files are line oriented::

    # comment
    section.key = value

Unknown keys are errors. ``estimator.mu_max``/``mu.max`` and
``estimator.k_mu``/``mu.k`` name the same setting; giving both with
different values is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .errors import ConfigError


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v: str) -> Optional[float]:
    s = str(v).strip().lower()
    return None if s in ("", "auto", "none") else float(s)


def _str(v: str) -> str:
    return str(v).strip()


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "train.epochs": (int, 30),
    "train.max_steps": (int, -1),
    "train.optimizer": (_str, "adam"),
    "train.lr": (float, 1e-3),
    "train.momentum": (float, 0.9),
    "train.nesterov": (_bool, False),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.weight_decay": (float, 0.0),
    "train.seed": (int, 0),
    "train.eval_period": (int, 1),
    "train.eval_batch": (int, 500),
    "data.name": (_str, "synth"),
    "data.dir": (_str, ""),
    "data.batch": (int, 64),
    "data.augment": (_bool, True),
    "data.subset_n": (int, 0),
    "data.synth_n": (int, 2000),
    "data.synth_classes": (int, 10),
    "model.arch": (_str, "MLP"),
    "model.width": (_opt_float, None),
    "model.classes": (_opt_float, None),
    "model.pretrained_path": (_str, ""),
    "quant.clip_family": (_str, "INTERVAL"),
    "quant.round_family": (_str, "WEIGHT"),
    "quant.bits_w": (int, 2),
    "quant.bits_a": (int, 2),
    "quant.pact_init_m": (float, 8.0),
    "estimator.kind": (_str, "PEGE"),
    "estimator.mu_max": (float, 0.1),
    "estimator.k_mu": (_opt_float, None),
    "estimator.delta": (float, 1e-3),
    "replace.family": (_str, "auto"),
    "replace.p0": (float, 0.3),
    "replace.t_full_frac": (float, 0.6),
    "replace.base": (float, 10.0),
    "replace.p_const": (float, 0.8),
    "replace.granularity": (_str, "PER_LAYER"),
    "replace.activations": (_bool, False),
    "mu.family": (_str, "EXPONENTIAL"),
    "mu.max": (float, 0.1),
    "mu.k": (_opt_float, None),
}

ALIASES = {"mu.max": "estimator.mu_max", "mu.k": "estimator.k_mu"}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``section.key = value`` lines into a dict of typed values."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    out = {}
    for key, value in raw.items():
        parser = SCHEMA[key][0]
        try:
            out[key] = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: bad value for {key}: {value!r} ({exc})") from None
    for alias, canon in ALIASES.items():
        if alias in out:
            if canon in out and out[canon] != out[alias]:
                raise ConfigError(f"{alias} and {canon} are the same setting but differ")
            out[canon] = out.pop(alias)
    return out


def load_config(path: str) -> "TrainConfig":
    with open(path) as fh:
        return TrainConfig.from_mapping(parse_config_text(fh.read(), path))


@dataclass
class TrainConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in SCHEMA.items() if k not in ALIASES}
        for k, v in self.values.items():
            k = ALIASES.get(k, k)
            if k not in merged:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = v
        self.values = merged
        if self["train.epochs"] < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not self["train.lr"] > 0:
            raise ConfigError("train.lr must be > 0")
        if self["train.optimizer"].lower() not in ("adam", "sgd", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self['train.optimizer']!r}")
        if self["train.eval_period"] < 1:
            raise ConfigError("train.eval_period must be >= 1")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        return cls(dict(mapping))

    def __getitem__(self, key: str):
        return self.values[ALIASES.get(key, key)]

    def with_overrides(self, **kw) -> "TrainConfig":
        """Copy with ``section__key=value`` overrides (``__`` stands for ``.``)."""
        vals = dict(self.values)
        for k, v in kw.items():
            vals[k.replace("__", ".")] = v
        return TrainConfig(vals)

    def to_text(self) -> str:
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            lines.append(f"{k} = {'auto' if v is None else v}")
        return "\n".join(lines) + "\n"
