"""Run configuration: an INI-style file with one section per stage.

::

    [sensor]
    alpha_min = -0.6108652381980153
    ...
    [extraction]
    lam = 2
    [odometry]
    window = 10
    [mapping]
    resolution = 0.05

Absent keys take their defaults; unknown sections or keys are rejected.
Angles are radians, distances meters, times seconds.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ValidationError
from .features import SensorSpec
from .mapping import MappingParams
from .odometry import OdometryParams
from .validation import check_positive


@dataclass(frozen=True)
class ExtractionParams:
    lam: int = 2
    sigma_edge: float = 0.05
    sigma_plane: float = 0.01
    max_edges: int = 150
    max_planars: int = 400
    range_margin: float = 0.02
    max_cells: int = 200
    min_neighbors: float | None = None

    def __post_init__(self):
        check_positive(self.lam, "lam", integer=True)
        check_positive(self.max_edges, "max_edges", integer=True, allow_zero=True)
        check_positive(self.max_planars, "max_planars", integer=True, allow_zero=True)
        check_positive(self.max_cells, "max_cells", integer=True)
        check_positive(self.sigma_edge, "sigma_edge")
        check_positive(self.sigma_plane, "sigma_plane", allow_zero=True)
        if not self.sigma_plane < self.sigma_edge:
            raise ValidationError("must be < sigma_edge", "sigma_plane")
        if not 0 <= self.range_margin < 1:
            raise ValidationError("must lie in [0, 1)", "range_margin")
        if self.min_neighbors is not None:
            check_positive(self.min_neighbors, "min_neighbors", allow_zero=True)


@dataclass(frozen=True)
class Config:
    sensor: SensorSpec = field(default_factory=SensorSpec)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    odometry: OdometryParams = field(default_factory=OdometryParams)
    mapping: MappingParams = field(default_factory=MappingParams)

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)


SECTIONS = {
    "sensor": SensorSpec,
    "extraction": ExtractionParams,
    "odometry": OdometryParams,
    "mapping": MappingParams,
}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, int):
            return int(text)
        return float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"cannot parse {text!r}", key) from None


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else None) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in defaults:
            raise ValidationError("unknown key", f"{section}.{key}")
        kwargs[key] = _parse_value(f"{section}.{key}", text, defaults[key])
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ValidationError(str(exc).split(": ", 1)[-1], f"{section}.{exc.key}" if exc.key else section) from None


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ValidationError("unknown section", name)
        sections[name] = _build(name, dict(parser[name]))
    return Config(**sections)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc}") from None
    return parse_config(text)


def merge_config(base: Config, text: str) -> Config:
    """Apply the keys present in ``text`` on top of ``base``."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from None
    updates = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ValidationError("unknown section", name)
        current = dataclasses.asdict(getattr(base, name))
        current = {k: ("none" if v is None else repr(v)) for k, v in current.items()}
        current.update(dict(parser[name]))
        updates[name] = _build(name, current)
    return base.replace(**updates)


def dump_config(config: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        values = dataclasses.asdict(getattr(config, name))
        parser[name] = {k: ("none" if v is None else repr(v)) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(config: Config, path) -> None:
    Path(path).write_text(dump_config(config))
