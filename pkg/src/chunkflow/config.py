"""Experiment configuration: JSON schema validation, defaults and the config hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import jsonschema

from .sim import LatencyModel, default_fleet
from .unified_space import EmbodimentSpec, SlotLayout, default_layout, load_space_config


class ConfigError(ValueError):
    """Schema or reference error; ``pointer`` is the JSON pointer of the first failure."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '<root>'}: {message}")
        self.pointer = pointer
        self.message = message


def _data(name: str) -> dict:
    return json.loads(resources.files("chunkflow").joinpath("data").joinpath(name).read_text())


def schema() -> dict:
    return _data("config.schema.json")


def default_config() -> dict:
    return _data("default_config.json")


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(obj) -> None:
    """Raise ConfigError at the first failing location (document order)."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(obj), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        raise ConfigError(_pointer(err.absolute_path), err.message)


def merge(base: Mapping, override: Mapping) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace."""
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(obj: Mapping) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    raw: dict
    layout: SlotLayout
    fleet: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def hash(self) -> str:
        """Hash of everything except the output location."""
        return config_hash({k: v for k, v in self.raw.items() if k != "output"})

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def embodiment(self, emb_id: str) -> EmbodimentSpec:
        return self.fleet[emb_id]

    @property
    def embodiment_ids(self) -> list[str]:
        return list(self.raw.get("embodiments") or self.fleet)

    def latency(self, emb: EmbodimentSpec) -> LatencyModel:
        """Latency model for ``emb``; ``relative`` values are fractions of its budget.

        The draws follow the session seed.
        """
        spec = dict(self.raw["latency"])
        scale = emb.latency_budget if spec.pop("relative", False) else 1.0
        for key in ("value", "lo", "hi", "magnitude"):
            if key in spec:
                spec[key] = spec[key] * scale
        return LatencyModel.from_json(spec)


def build(obj: Mapping, overrides: Mapping | None = None) -> ExperimentConfig:
    """Validate ``obj``, fill defaults, apply ``overrides`` and resolve the fleet."""
    validate(obj)
    raw = merge(default_config(), obj)
    if overrides:
        raw = merge(raw, overrides)
    validate(raw)
    if "space" in raw:
        layout, fleet = load_space_config(raw["space"])
    else:
        layout = default_layout()
        fleet = default_fleet(layout)
    for i, emb_id in enumerate(raw.get("embodiments", [])):
        if emb_id not in fleet:
            raise ConfigError(f"/embodiments/{i}", f"unknown embodiment {emb_id!r}")
    return ExperimentConfig(raw, layout, fleet)


def load(path: str | Path | None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Read a config file (or the packaged default when ``path`` is None)."""
    if path is None:
        obj = default_config()
    else:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON: {exc}") from exc
    return build(obj, overrides)
