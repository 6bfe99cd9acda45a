"""JSON configuration files: strict loading, seed resolution and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .electrostatics import ForceModel
from .rig import (
    ContactPotentialModel,
    DriftModel,
    LoopGainModel,
    NoiseModel,
    RigConfig,
    StageSchedule,
)

SCHEMA_VERSION = 1
SEED_ENV = "SPHEREPLATE_SEED"
DEFAULT_SEED = RigConfig.__dataclass_fields__["seed"].default

_NESTED = {
    ForceModel,
    StageSchedule,
    ContactPotentialModel,
    LoopGainModel,
    NoiseModel,
    DriftModel,
}


class ConfigError(ValueError):
    """Configuration file does not match the schema."""


@dataclass
class AnalysisOptions:
    mask: str = "farthest:41"
    p_modes: list[str] = field(default_factory=lambda: ["free", "1", "0.7"])
    sigma_rel: float = 0.0056
    outlier_sigma: float = 5.0
    vdc_run: int | None = None


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if hint in _NESTED:
            kwargs[key] = _build(hint, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def rig_from_dict(data: dict) -> RigConfig:
    return _build(RigConfig, data, "rig")


def analysis_from_dict(data: dict) -> AnalysisOptions:
    opts = _build(AnalysisOptions, data, "analysis")
    if not opts.sigma_rel > 0:
        raise ConfigError("analysis.sigma_rel must be positive")
    return opts


def default_seed() -> int:
    """Built-in seed, overridable through the ``SPHEREPLATE_SEED`` environment variable."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw, 0)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc


def load_config(path, seed: int | None = None) -> tuple[RigConfig, AnalysisOptions]:
    """Load and validate a config file.

    Seed precedence: ``seed`` argument, then ``rig.seed`` in the file, then
    :func:`default_seed`.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw, seed)


def config_from_dict(raw: dict, seed: int | None = None) -> tuple[RigConfig, AnalysisOptions]:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    unknown = sorted(set(raw) - {"schema_version", "rig", "analysis"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    rig_data = dict(raw.get("rig", {}))
    if seed is not None:
        rig_data["seed"] = seed
    elif "seed" not in rig_data:
        rig_data["seed"] = default_seed()
    return rig_from_dict(rig_data), analysis_from_dict(raw.get("analysis", {}))


def config_to_dict(rig: RigConfig, analysis: AnalysisOptions | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "rig": dataclasses.asdict(rig),
        "analysis": dataclasses.asdict(analysis or AnalysisOptions()),
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(rig: RigConfig, analysis: AnalysisOptions | None = None) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(rig, analysis)).encode()).hexdigest()
