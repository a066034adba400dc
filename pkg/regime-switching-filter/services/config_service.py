from __future__ import annotations
from pathlib import Path
from typing import Callable, Dict, List, Optional
import logging

from pydantic import BaseModel, ConfigDict, ValidationError

from services.errors import ConfigError, ModelError
from services.experiment_service import ExperimentConfig, FilterSettings
from services.grid_oracle_service import GridConfig
from services.model_service import (
    InitialLaw,
    IntensityMatrix,
    ModelParams,
    ObservationFunction,
    StateSpace,
)
from services.svol_service import SvolParams

logger = logging.getLogger(__name__)

SECTION_KEYS: Dict[str, List[str]] = {
    "model": ["states", "q", "q_alpha", "q_beta", "epsilon", "delta_t", "m", "n_obs", "rho0", "x0", "h", "v0", "seed"],
    "filter": [
        "particles",
        "resample_threshold",
        "resampling",
        "psi_path_samples",
        "quad_order",
        "oracle_x_cells",
        "oracle_v_cells",
        "oracle_budget",
        "refresh_paths",
    ],
    "svol": ["r", "rho"],
    "experiment": [
        "name",
        "sweep",
        "values",
        "seeds",
        "filters",
        "particle_schedule",
        "fine_dt",
        "record_runtime",
        "threads",
    ],
    "output": ["directory"],
}
REQUIRED_MODEL_KEYS = ["states", "q", "epsilon", "delta_t", "m", "n_obs", "h"]

_MODEL_FIELD_KEYS = {
    "space": "states",
    "q": "q",
    "epsilon": "epsilon",
    "h": "h",
    "delta_t": "delta_t",
    "m": "m",
    "n_obs": "n_obs",
    "rho0": "rho0",
    "x0_law": "x0",
    "v0": "v0",
    "seed": "seed",
}
_FILTER_FIELD_KEYS = {"grid": "oracle_budget"}
_EXPERIMENT_FIELD_KEYS = {"sweep_variable": "sweep", "values": "values", "seeds": "seeds", "filters": "filters"}


class ConfigEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    section: str
    key: str
    value: str
    line: int
    column: int


def _number(token: str) -> float:
    if "/" in token:
        num, den = token.split("/", 1)
        return float(num) / float(den)
    return float(token)


def _as_float(text: str) -> float:
    return _number(text.strip())


def _as_int(text: str) -> int:
    value = float(text.strip())
    if value != int(value):
        raise ValueError(f"'{text.strip()}' is not an integer")
    return int(value)


def _as_float_list(text: str) -> List[float]:
    return [_number(t.strip()) for t in text.split(",") if t.strip()]


def _as_int_list(text: str) -> List[int]:
    return [_as_int(t) for t in text.split(",") if t.strip()]


def _as_str_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _as_bool(text: str) -> bool:
    word = text.strip().lower()
    if word in ("true", "yes", "1", "on"):
        return True
    if word in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"'{text.strip()}' is not a boolean")


def _as_matrix(text: str) -> List[List[float]]:
    rows = [r for r in text.split(";") if r.strip()]
    return [[_number(t) for t in r.replace(",", " ").split()] for r in rows]


def _as_initial_law(text: str) -> InitialLaw:
    tokens = text.split()
    if not tokens:
        raise ValueError("empty initial law")
    return InitialLaw(kind=tokens[0], params=tuple(_number(t) for t in tokens[1:]))


def _as_observation(text: str) -> ObservationFunction:
    tokens = text.split()
    if not tokens:
        raise ValueError("empty observation function")
    kind, args = tokens[0], [_number(t) for t in tokens[1:]]
    builders = {
        "linear": (ObservationFunction.linear, 1),
        "tanh": (ObservationFunction.tanh, 1),
        "logistic": (ObservationFunction.logistic, 2),
        "constant": (ObservationFunction.constant, 1),
    }
    if kind not in builders:
        raise ValueError(f"unknown observation function '{kind}' (linear, tanh, logistic, constant)")
    build, arity = builders[kind]
    if len(args) != arity:
        raise ValueError(f"'{kind}' takes {arity} parameter(s)")
    return build(*args)


def _first_message(e: Exception) -> str:
    if isinstance(e, ValidationError):
        err = e.errors()[0]
        return str(err["msg"]).removeprefix("Value error, ")
    return str(e)


class RunConfig(BaseModel):
    """A parsed configuration file. Every value keeps its line and column for error messages."""

    model_config = ConfigDict(frozen=True)

    source: str
    sections: Dict[str, Dict[str, ConfigEntry]]
    section_lines: Dict[str, int]

    def has_section(self, name: str) -> bool:
        return name in self.sections

    def entry(self, section: str, key: str) -> Optional[ConfigEntry]:
        return self.sections.get(section, {}).get(key)

    def error(self, message: str, section: str, key: Optional[str] = None) -> ConfigError:
        entry = self.entry(section, key) if key else None
        if entry is not None:
            return ConfigError(message, key=key, line=entry.line, column=entry.column, source=self.source)
        return ConfigError(message, key=key, line=self.section_lines.get(section), source=self.source)

    def value(self, section: str, key: str, convert: Callable[[str], object], default=None):
        entry = self.entry(section, key)
        if entry is None:
            return default
        try:
            return convert(entry.value)
        except (ValueError, ValidationError, ZeroDivisionError) as e:
            raise self.error(_first_message(e), section, key) from e

    def _require_section(self, name: str) -> None:
        if name not in self.sections:
            raise ConfigError(f"missing [{name}] section", key=name, source=self.source)

    def model_params(self, seed: Optional[int] = None) -> ModelParams:
        self._require_section("model")
        for key in REQUIRED_MODEL_KEYS:
            if self.entry("model", key) is None:
                raise self.error("missing required key", "model", key)

        space = self.value("model", "states", lambda t: StateSpace(values=tuple(_as_float_list(t))))
        alpha = self.value("model", "q_alpha", _as_float)
        beta = self.value("model", "q_beta", _as_float)
        q = self.value("model", "q", lambda t: IntensityMatrix.constant(_as_matrix(t), alpha=alpha, beta=beta))
        fields = dict(
            space=space,
            q=q,
            epsilon=self.value("model", "epsilon", _as_float),
            h=self.value("model", "h", _as_observation),
            delta_t=self.value("model", "delta_t", _as_float),
            m=self.value("model", "m", _as_int),
            n_obs=self.value("model", "n_obs", _as_int),
        )
        rho0 = self.value("model", "rho0", lambda t: tuple(_as_float_list(t)))
        if rho0 is not None:
            fields["rho0"] = rho0
        x0 = self.value("model", "x0", _as_initial_law)
        if x0 is not None:
            fields["x0_law"] = x0
        v0 = self.value("model", "v0", _as_float)
        if v0 is not None:
            fields["v0"] = v0
        config_seed = self.value("model", "seed", _as_int)
        if seed is not None:
            fields["seed"] = seed
        elif config_seed is not None:
            fields["seed"] = config_seed

        try:
            return ModelParams(**fields)
        except (ValidationError, ModelError) as e:
            key = None
            if isinstance(e, ValidationError) and e.errors()[0]["loc"]:
                key = _MODEL_FIELD_KEYS.get(str(e.errors()[0]["loc"][0]))
            raise self.error(_first_message(e), "model", key) from e

    def filter_settings(self) -> FilterSettings:
        fields = {}
        for key, convert in (
            ("particles", _as_int),
            ("resample_threshold", _as_float),
            ("resampling", str.strip),
            ("psi_path_samples", _as_int),
            ("quad_order", _as_int),
            ("refresh_paths", _as_bool),
        ):
            value = self.value("filter", key, convert)
            if value is not None:
                fields[key] = value
        grid = {}
        for key, field in (("oracle_x_cells", "x_cells"), ("oracle_v_cells", "v_cells"), ("oracle_budget", "budget")):
            value = self.value("filter", key, _as_int)
            if value is not None:
                grid[field] = value
        try:
            if grid:
                fields["grid"] = GridConfig(**{**FilterSettings().grid.model_dump(), **grid})
            return FilterSettings(**fields)
        except ValidationError as e:
            loc = e.errors()[0]["loc"]
            key = str(loc[0]) if loc else None
            key = _FILTER_FIELD_KEYS.get(key, key)
            if key in ("x_cells", "v_cells", "budget"):
                key = f"oracle_{key}"
            raise self.error(_first_message(e), "filter", key) from e

    def svol_params(self) -> Optional[SvolParams]:
        if not self.has_section("svol"):
            return None
        fields = {}
        for key in ("r", "rho"):
            value = self.value("svol", key, _as_float)
            if value is not None:
                fields[key] = value
        try:
            return SvolParams(**fields)
        except ValidationError as e:
            loc = e.errors()[0]["loc"]
            raise self.error(_first_message(e), "svol", str(loc[0]) if loc else None) from e

    def experiment_config(self, seed: Optional[int] = None, threads: Optional[int] = None) -> ExperimentConfig:
        self._require_section("experiment")
        if self.entry("experiment", "sweep") is None:
            raise self.error("missing required key", "experiment", "sweep")
        if self.entry("experiment", "values") is None:
            raise self.error("missing required key", "experiment", "values")
        sweep = self.value("experiment", "sweep", str.strip)
        sweep = "m" if sweep == "dt" else sweep
        values = self.value("experiment", "values", _as_float_list)
        fields = dict(
            base=self.model_params(seed),
            sweep_variable=sweep,
            values=tuple(values),
            filter_settings=self.filter_settings(),
            echo=self.manifest_text(seed),
        )
        for key, convert in (
            ("name", str.strip),
            ("seeds", lambda t: tuple(_as_int_list(t))),
            ("filters", lambda t: tuple(_as_str_list(t))),
            ("particle_schedule", str.strip),
            ("fine_dt", _as_float),
            ("record_runtime", _as_bool),
            ("threads", _as_int),
        ):
            value = self.value("experiment", key, convert)
            if value is not None:
                fields[key] = value
        if threads is not None:
            fields["threads"] = threads
        try:
            return ExperimentConfig(**fields)
        except ValidationError as e:
            loc = e.errors()[0]["loc"]
            key = str(loc[0]) if loc else None
            raise self.error(_first_message(e), "experiment", _EXPERIMENT_FIELD_KEYS.get(key, key)) from e

    def output_directory(self) -> Optional[str]:
        return self.value("output", "directory", str.strip)

    def manifest_text(self, seed: Optional[int] = None, fine_dt: Optional[float] = None) -> str:
        """Canonical echo of the configuration; parsing it back gives the same run."""
        lines = []
        for section in SECTION_KEYS:
            if section not in self.sections:
                continue
            lines.append(f"[{section}]")
            entries = dict((k, e.value) for k, e in self.sections[section].items())
            if section == "model" and seed is not None:
                entries["seed"] = str(seed)
            for key in SECTION_KEYS[section]:
                if key in entries:
                    lines.append(f"{key} = {entries[key]}")
            if section == "model" and fine_dt is not None:
                lines.append(f"# fine_dt = {fine_dt!r}")
            lines.append("")
        return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    sections: Dict[str, Dict[str, ConfigEntry]] = {}
    section_lines: Dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped or stripped.startswith(";"):
            continue
        indent = len(line) - len(line.lstrip())
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", line=lineno, column=indent + 1, source=source)
            name = stripped[1:-1].strip()
            if name not in SECTION_KEYS:
                raise ConfigError("unknown section", key=name, line=lineno, column=indent + 1, source=source)
            if name in sections:
                raise ConfigError("duplicate section", key=name, line=lineno, column=indent + 1, source=source)
            sections[name] = {}
            section_lines[name] = lineno
            current = name
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno, column=indent + 1, source=source)
        if current is None:
            raise ConfigError("key outside of any section", line=lineno, column=indent + 1, source=source)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        value = value_part.strip()
        value_column = len(key_part) + 1 + (len(value_part) - len(value_part.lstrip())) + 1
        if key not in SECTION_KEYS[current]:
            raise ConfigError(f"unknown key in [{current}]", key=key, line=lineno, column=indent + 1, source=source)
        if key in sections[current]:
            raise ConfigError("duplicate key", key=key, line=lineno, column=indent + 1, source=source)
        if not value:
            raise ConfigError("missing value", key=key, line=lineno, column=value_column, source=source)
        sections[current][key] = ConfigEntry(section=current, key=key, value=value, line=lineno, column=value_column)
    return RunConfig(source=source, sections=sections, section_lines=section_lines)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration: {e}", source=str(path)) from e
    logger.debug(f"  > Loaded configuration from {path}")
    return parse_config_text(text, source=str(path))
