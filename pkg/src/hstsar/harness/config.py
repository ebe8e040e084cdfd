"""Experiment configuration: one JSON file with ``model``/``train``/``sar``/``task``/``sweep``
sections, plus ``section.key=value`` overrides.

Model fields that follow from the task (``n_base``, ``vocab_size``,
``num_classes``) are derived, not configured.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ConfigurationError, ParseError
from ..hst import HstModelConfig
from ..sar import SarConfig
from .tasks import SyntheticTaskSpec
from .train import TrainConfig, model_config_for_task

OUTPUT_ROOT_ENV = "HSTSAR_OUTPUT_ROOT"
SECTIONS = ("model", "train", "sar", "task", "sweep")
DERIVED_MODEL_KEYS = ("n_base", "vocab_size", "num_classes")
SWEEP_DEFAULTS = {"g_values": [0, 1, 4, 16], "repeats": 2, "workers": 1}


def output_root(default="runs"):
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def _field_names(cls):
    return {f.name for f in fields(cls)}


_MODEL_KEYS = _field_names(HstModelConfig) - set(DERIVED_MODEL_KEYS)
_ALLOWED = {
    "model": _MODEL_KEYS,
    "train": _field_names(TrainConfig),
    "sar": _field_names(SarConfig),
    "task": _field_names(SyntheticTaskSpec),
    "sweep": set(SWEEP_DEFAULTS),
}


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"g": 1, "w": 8, "d": 32, "layers": 2, "heads": 2})
    train: TrainConfig = field(default_factory=TrainConfig)
    sar: SarConfig = field(default_factory=lambda: SarConfig(enabled=False))
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    sweep: dict = field(default_factory=lambda: dict(SWEEP_DEFAULTS))

    def model_config(self):
        kw = dict(self.model)
        try:
            g, w = kw.pop("g"), kw.pop("w")
        except KeyError as e:
            raise ConfigurationError(f"model section needs {e.args[0]!r}") from None
        return model_config_for_task(self.task, g, w, **kw)

    def to_dict(self):
        return {
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "sar": asdict(self.sar),
            "task": self.task.to_dict(),
            "sweep": dict(self.sweep),
        }


def parse_value(text):
    """JSON literal when it parses (numbers, bools, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item):
    """``"train.lr=0.01"`` -> ``("train", "lr", 0.01)``."""
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
    return section, name, parse_value(value.strip())


def _check_section(section, values):
    if section not in _ALLOWED:
        raise ConfigurationError(f"unknown config section {section!r}; expected one of {list(SECTIONS)}")
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    if section == "model":
        derived = sorted(set(values) & set(DERIVED_MODEL_KEYS))
        if derived:
            raise ConfigurationError(f"model keys {derived} are derived from the task")
    unknown = sorted(set(values) - _ALLOWED[section])
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {unknown}")


def build_config(doc=None, overrides=()):
    """Assemble an :class:`ExperimentConfig` from a parsed document and overrides."""
    doc = {k: dict(v) for k, v in (doc or {}).items()} if isinstance(doc, dict) else doc
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    for section, values in doc.items():
        _check_section(section, values)
    for item in overrides:
        section, name, value = parse_override(item)
        _check_section(section, {name: value})
        doc.setdefault(section, {})[name] = value

    base = ExperimentConfig()
    model = dict(base.model)
    model.update(doc.get("model", {}))
    sweep = dict(SWEEP_DEFAULTS)
    sweep.update(doc.get("sweep", {}))
    try:
        sar_kw = {"enabled": False, **doc.get("sar", {})}
        return ExperimentConfig(
            model=model,
            train=TrainConfig(**doc.get("train", {})),
            sar=SarConfig(**sar_kw),
            task=SyntheticTaskSpec(**doc.get("task", {})),
            sweep=sweep,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(str(e)) from None


def load_config(path=None, overrides=()):
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, f"line {e.lineno}") from None
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from None
    return build_config(doc, overrides)
