"""
Global configuration file. TOML sections map onto the module configuration
dataclasses:

    [pdn]              PDNParams
    [tdc]              TDCConfig
    [placement.<name>] PlacementProfile (adds to or overrides the defaults)
    [victims]          VictimRecipe
    [attacks]          AttackConfig
    [detector]         DetectorConfig
    [avoidance]        AvoidanceConfig
    [recipe]           ExperimentRecipe
    [data]             DataConfig
"""
import dataclasses
import logging
import tomllib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .attacks import AttackConfig
from .avoidance import AvoidanceConfig
from .core import ConfigError
from .datasets import DataConfig
from .detector import DetectorConfig
from .harness import ExperimentRecipe
from .leakage import PLACEMENTS, PDNParams, PlacementProfile
from .tdc import TDCConfig
from .utils import canonical_digest
from .victims import VictimRecipe

logger = logging.getLogger(__name__)

SECTIONS = {
    "pdn": PDNParams,
    "tdc": TDCConfig,
    "victims": VictimRecipe,
    "attacks": AttackConfig,
    "detector": DetectorConfig,
    "avoidance": AvoidanceConfig,
    "data": DataConfig,
}
# Recipe fields filled from their own sections
_NESTED = {"victim_recipe", "attack_config", "detector", "pdn", "tdc", "placements", "data"}


def _default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    def bad(expected: str) -> ConfigError:
        return ConfigError(f"[{section}] {key} must be {expected}, got {value!r}")

    if default is None or default is dataclasses.MISSING:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if isinstance(default, Enum):
        if isinstance(value, bool) or not isinstance(value, (str, int)):
            raise bad("a name or code")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise bad("a list")
        return tuple(value)
    return value


def build_section(cls, section: str, values: Dict[str, Any], skip=frozenset()):
    """
    Instantiates cls from one section, rejecting unknown keys and wrong types.
    """
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}, known: {sorted(fields)}")
        kwargs[key] = _coerce(section, key, value, _default(fields[key]))
    return kwargs if skip else _instantiate(cls, section, kwargs)


def _instantiate(cls, section: str, kwargs: Dict[str, Any]):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(f"[{section}] {err}") from err


@dataclass
class Config:
    recipe: ExperimentRecipe = field(default_factory=ExperimentRecipe)
    avoidance: AvoidanceConfig = field(default_factory=AvoidanceConfig)

    def digest(self) -> str:
        """
        SHA-256 of the canonical JSON of the resolved configuration.
        """
        return canonical_digest(self)


def parse_config(raw: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Config:
    """
    Builds a Config from parsed TOML. overrides are applied to [recipe] keys
    (seed, output_dir, full_scale).
    """
    known = set(SECTIONS) | {"placement", "recipe"}
    for name in raw:
        if name not in known:
            raise ConfigError(f"Unknown section [{name}], known: {sorted(known)}")

    built = {name: build_section(cls, name, raw.get(name, {})) for name, cls in SECTIONS.items()}

    placements = dict(PLACEMENTS)
    for name, values in raw.get("placement", {}).items():
        if not isinstance(values, dict):
            raise ConfigError(f"[placement] entries must be tables, got {name} = {values!r}")
        base = dataclasses.asdict(placements.get(name, PlacementProfile(name, code=len(placements))))
        base.update(build_section(PlacementProfile, f"placement.{name}", values, skip={"name"}))
        placements[name] = _instantiate(PlacementProfile, f"placement.{name}", base)

    recipe_values = dict(raw.get("recipe", {}))
    recipe_values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    recipe_kwargs = build_section(ExperimentRecipe, "recipe", recipe_values, skip=_NESTED)
    recipe = _instantiate(
        ExperimentRecipe,
        "recipe",
        dict(
            recipe_kwargs,
            victim_recipe=built["victims"],
            attack_config=built["attacks"],
            detector=built["detector"],
            pdn=built["pdn"],
            tdc=built["tdc"],
            placements=placements,
            data=built["data"],
        ),
    )
    return Config(recipe, built["avoidance"])


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """
    Reads a TOML configuration file; without a path every default applies.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError as err:
            raise ConfigError(f"Configuration file {path} not found") from err
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"Cannot parse {path}: {err}") from err
    config = parse_config(raw, overrides)
    logger.debug("Configuration digest %s", config.digest())
    return config
