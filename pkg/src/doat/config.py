"""INI-style run configuration.

A config has a ``[scenario]`` section with scenario fields, an optional
``[sweep]`` section whose keys are comma-separated axis lists, and an
optional ``[output]`` section with result and trace paths. Relative paths
are resolved against the config file's directory. Unknown sections and
keys are errors.

    [scenario]
    n_nodes = 1000
    density = 0.05

    [sweep]
    density = 0.01, 0.05, 0.20
    seed = 1-10

    [output]
    results = results.csv
"""
from __future__ import annotations

import configparser
import itertools
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .experiments import Scenario, ScenarioError

SECTIONS = ("scenario", "sweep", "output")
SWEEP_AXES = ("n_nodes", "density", "update_interval", "seed", "curve_kind", "bloom_m", "groups", "mode")
OUTPUT_KEYS = ("results", "trace")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: Scenario
    axes: dict[str, tuple] = field(default_factory=dict)
    results: Path | None = None
    trace: Path | None = None
    source: Path | None = None

    def expand(self) -> list[Scenario]:
        """Cross product of the sweep axes; a single scenario without axes."""
        if not self.axes:
            return [self.scenario]
        names = sorted(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[n] for n in names)):
            s = replace(self.scenario, **dict(zip(names, combo)))
            out.append(s.validate())
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(Scenario)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _parse_value(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if kind.startswith("str | None"):
        return None if text in ("", "none", "None") else text
    if kind.startswith("float | None"):
        return None if text in ("", "none", "None") else _parse_float(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return _parse_float(text)
    if kind == "bool":
        return _parse_bool(text)
    if kind == "tuple":
        return tuple(_parse_float(v) for v in _split(text))
    return text


def _split(text: str) -> list[str]:
    return [v.strip() for v in text.replace("\n", ",").split(",") if v.strip()]


def _parse_axis(name: str, text: str) -> tuple:
    items = _split(text)
    if not items:
        raise ConfigError(f"sweep axis {name!r} is empty")
    values = []
    for item in items:
        if name == "seed" and "-" in item:
            lo, hi = (int(v) for v in item.split("-", 1))
            if hi < lo:
                raise ConfigError(f"bad seed range {item!r}")
            values.extend(range(lo, hi + 1))
        else:
            values.append(_parse_value(name, item))
    return tuple(values)


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), empty_lines_in_values=False,
    )
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    base_dir = base_dir or Path(".")
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if not parser.has_section("scenario"):
        raise ConfigError("missing [scenario] section")

    values = {}
    for key, raw in parser.items("scenario"):
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r} in [scenario]")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"[scenario] {key}: {exc}") from None
    if values.get("dataset"):
        values["dataset"] = str((base_dir / values["dataset"]).resolve())

    axes: dict[str, tuple] = {}
    if parser.has_section("sweep"):
        for key, raw in parser.items("sweep"):
            if key not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {key!r}; allowed: {', '.join(SWEEP_AXES)}")
            try:
                axes[key] = _parse_axis(key, raw)
            except ValueError as exc:
                raise ConfigError(f"[sweep] {key}: {exc}") from None
        if not axes:
            raise ConfigError("[sweep] has no axes")

    out: dict[str, Path] = {}
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key not in OUTPUT_KEYS:
                raise ConfigError(f"unknown key {key!r} in [output]")
            out[key] = base_dir / raw.strip()

    try:
        scenario = Scenario(**values).validate()
    except (TypeError, ScenarioError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(scenario, axes, out.get("results"), out.get("trace"))
    try:
        cfg.expand()
    except (TypeError, ScenarioError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    cfg = parse_config(text, path.parent)
    cfg.source = path
    return cfg
