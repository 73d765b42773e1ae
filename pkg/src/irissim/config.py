"""Scenario files: YAML in, validated :class:`~irissim.engine.Scenario` out.

A scenario file is a nested mapping whose sections mirror the config
dataclasses (``timing``, ``protocol``, ``energy``, ``topology``, ``loss``,
``drift``, ``stop``, ``failures``) plus a few top-level run settings and an
optional ``campaign`` section.  Every key is checked; anything unknown is an
error that names its full key path.
"""
from __future__ import annotations

import copy
import dataclasses
import itertools
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .channel import LossModel
from .energy import EnergyConfig
from .engine import (DriftSpec, FailureEvent, LossSpec, Scenario, StopKind, StopSpec, Traffic,
                     scenario_errors)
from .protocol import NonRouteMode, ProtocolConfig, TimingConfig
from .topology import TopologyKind, TopologySpec


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


# section name -> (dataclass, Scenario attribute)
SECTIONS = {
    "timing": (TimingConfig, "timing"),
    "protocol": (ProtocolConfig, "proto"),
    "energy": (EnergyConfig, "energy"),
    "topology": (TopologySpec, "topology"),
    "loss": (LossSpec, "loss"),
    "drift": (DriftSpec, "drift"),
    "stop": (StopSpec, "stop"),
}
TOP_LEVEL = {"name": str, "seed": int, "max_frames": int, "trace_level": str,
             "traffic": Traffic, "check_invariants": bool}
ENUMS = {("protocol", "nonroute_mode"): NonRouteMode, ("topology", "kind"): TopologyKind,
         ("loss", "model"): LossModel, ("stop", "kind"): StopKind}
FAILURE_KEYS = {"node", "at_s", "after_formation"}
CAMPAIGN_KEYS = {"runs", "base_seed", "sweep"}


@dataclass
class CampaignSettings:
    runs: int = 50
    base_seed: int = 0
    sweep: dict = field(default_factory=dict)


@dataclass
class LoadedConfig:
    scenario: Scenario
    campaign: CampaignSettings
    raw: dict


# ---------------------------------------------------------------------------
# coercion


def _coerce(value: Any, default: Any, path: str, enum: Optional[type] = None):
    """Convert ``value`` to the type of ``default``; raise ValueError with ``path``."""
    if enum is not None:
        try:
            return enum(value)
        except ValueError:
            allowed = ", ".join(e.value for e in enum)
            raise ValueError(f"{path}: {value!r} is not one of {{{allowed}}}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ValueError(f"{path}: expected a list of {len(default)} numbers, got {value!r}")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{path}: expected a string, got {value!r}")
        return value
    # optional fields default to None: accept None or a number/string
    if value is None or isinstance(value, (str, int, float)) and not isinstance(value, bool):
        return float(value) if isinstance(value, int) else value
    raise ValueError(f"{path}: unsupported value {value!r}")


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _field_errors(section: str, cls, message: str) -> list[str]:
    """Re-key constructor messages such as ``'stl must be >= 4'`` as ``timing.stl: ...``."""
    names = {f.name for f in dataclasses.fields(cls)}
    out = []
    for part in message.split("; "):
        head, _, rest = part.partition(" ")
        if head in names:
            out.append(f"{section}.{head}: {rest}")
        else:
            out.append(f"{section}: {part}")
    return out


def _build_section(section: str, raw: Any, errors: list[str]):
    cls, _ = SECTIONS[section]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{section}: expected a mapping")
        return cls()
    defaults = _defaults(cls)
    kwargs = {}
    for key, value in raw.items():
        path = f"{section}.{key}"
        if key not in defaults:
            errors.append(f"{path}: unknown key")
            continue
        try:
            kwargs[key] = _coerce(value, defaults[key], path, ENUMS.get((section, key)))
        except ValueError as exc:
            errors.append(str(exc))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        errors.extend(_field_errors(section, cls, str(exc)))
        return None


def _build_failures(raw: Any, errors: list[str]) -> tuple:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        errors.append("failures: expected a list")
        return ()
    out = []
    for i, item in enumerate(raw):
        path = f"failures[{i}]"
        if not isinstance(item, dict):
            errors.append(f"{path}: expected a mapping")
            continue
        for key in item:
            if key not in FAILURE_KEYS:
                errors.append(f"{path}.{key}: unknown key")
        node = item.get("node")
        if isinstance(node, bool) or not isinstance(node, (int, str)):
            errors.append(f"{path}.node: expected a node id or random_route/random_nonroute")
            continue
        try:
            at_s = _coerce(item.get("at_s", 0.0), 0.0, f"{path}.at_s")
            after = _coerce(item.get("after_formation", False), False, f"{path}.after_formation")
        except ValueError as exc:
            errors.append(str(exc))
            continue
        out.append(FailureEvent(node, at_s, after))
    return tuple(out)


def _build_campaign(raw: Any, errors: list[str]) -> CampaignSettings:
    if raw is None:
        return CampaignSettings()
    if not isinstance(raw, dict):
        errors.append("campaign: expected a mapping")
        return CampaignSettings()
    for key in raw:
        if key not in CAMPAIGN_KEYS:
            errors.append(f"campaign.{key}: unknown key")
    out = CampaignSettings()
    try:
        out.runs = _coerce(raw.get("runs", 50), 0, "campaign.runs")
        out.base_seed = _coerce(raw.get("base_seed", 0), 0, "campaign.base_seed")
    except ValueError as exc:
        errors.append(str(exc))
    if out.runs < 1:
        errors.append("campaign.runs: must be >= 1")
    if out.base_seed < 0:
        errors.append("campaign.base_seed: must be >= 0")
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict):
        errors.append("campaign.sweep: expected a mapping of key path -> list of values")
        sweep = {}
    for key, values in sweep.items():
        if not isinstance(values, list) or not values:
            errors.append(f"campaign.sweep.{key}: expected a non-empty list")
        else:
            errors.extend(sweep_key_errors(key))
    out.sweep = {k: list(v) for k, v in sweep.items() if isinstance(v, list)}
    return out


def sweep_key_errors(key: str) -> list[str]:
    parts = key.split(".")
    if len(parts) == 1:
        return [] if key in TOP_LEVEL else [f"campaign.sweep.{key}: not a scenario field"]
    if len(parts) == 2 and parts[0] in SECTIONS:
        cls, _ = SECTIONS[parts[0]]
        if parts[1] in {f.name for f in dataclasses.fields(cls)}:
            return []
    return [f"campaign.sweep.{key}: not a scenario field"]


# ---------------------------------------------------------------------------
# public API


def scenario_from_dict(raw: dict, collect: Optional[list[str]] = None) -> Optional[Scenario]:
    """Build a Scenario; errors go to ``collect`` (or raise ConfigError)."""
    errors: list[str] = [] if collect is None else collect
    n_before = len(errors)
    if not isinstance(raw, dict):
        errors.append("<root>: expected a mapping")
        if collect is None:
            raise ConfigError(errors)
        return None
    known = set(SECTIONS) | set(TOP_LEVEL) | {"failures", "campaign"}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown key")
    kwargs: dict[str, Any] = {}
    for section, (_, attr) in SECTIONS.items():
        if section in raw:
            built = _build_section(section, raw[section], errors)
            if built is not None:
                kwargs[attr] = built
    defaults = _defaults(Scenario)
    for key, typ in TOP_LEVEL.items():
        if key not in raw:
            continue
        try:
            enum = typ if isinstance(typ, type) and issubclass(typ, Enum) else None
            kwargs[key] = _coerce(raw[key], defaults[key], key, enum)
        except ValueError as exc:
            errors.append(str(exc))
    kwargs["failures"] = _build_failures(raw.get("failures"), errors)
    # cross-field checks run even after section errors (failed sections fall back to defaults)
    scenario = Scenario(**kwargs)
    errors.extend(e for e in scenario_errors(scenario) if e not in errors)
    if collect is None and errors:
        raise ConfigError(errors)
    return scenario if len(errors) == n_before else None


def load_raw(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    return raw if raw is not None else {}


def load(path) -> LoadedConfig:
    """Read and validate a scenario file (or preset name)."""
    raw = load_raw(resolve(path))
    errors: list[str] = []
    campaign = _build_campaign(raw.get("campaign") if isinstance(raw, dict) else None, errors)
    scenario = scenario_from_dict(raw, errors)
    if errors:
        raise ConfigError(errors)
    return LoadedConfig(scenario, campaign, raw)


def check(path) -> list[str]:
    """All validation messages for a scenario file; empty when it is valid."""
    try:
        load(path)
    except ConfigError as exc:
        return exc.errors
    return []


def set_path(raw: dict, key: str, value: Any) -> dict:
    """Copy of ``raw`` with the dotted ``key`` set to ``value``."""
    out = copy.deepcopy(raw)
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def sweep_grid(sweep: dict) -> list[dict]:
    """Cartesian product of sweep values, in declaration order."""
    if not sweep:
        return [{}]
    keys = list(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def with_overrides(raw: dict, overrides: dict) -> Scenario:
    for key, value in overrides.items():
        raw = set_path(raw, key, value)
    return scenario_from_dict(raw)


def scenario_to_dict(sc: Scenario) -> dict:
    """Fully resolved, YAML-safe view of a scenario (the manifest format)."""
    def plain(v):
        if isinstance(v, Enum):
            return v.value
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    out: dict[str, Any] = {k: plain(getattr(sc, k)) for k in TOP_LEVEL}
    for section, (_, attr) in SECTIONS.items():
        obj = getattr(sc, attr)
        out[section] = {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    out["failures"] = [{"node": ev.node, "at_s": ev.at_s, "after_formation": ev.after_formation}
                       for ev in sc.failures]
    return out


# ---------------------------------------------------------------------------
# presets


def preset_names() -> list[str]:
    root = resources.files("irissim") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str) -> Path:
    root = resources.files("irissim") / "presets"
    path = Path(str(root / f"{name}.yaml"))
    if not path.exists():
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(preset_names())}"])
    return path


def resolve(path_or_preset) -> Path:
    """A file path, or the name of a bundled preset."""
    p = Path(path_or_preset)
    if p.exists():
        return p
    if p.suffix == "" and "/" not in str(path_or_preset):
        return preset_path(str(path_or_preset))
    raise ConfigError([f"{path_or_preset}: no such file"])
