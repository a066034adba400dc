from __future__ import annotations
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple
import hashlib
import json
import logging
import math
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config.settings import Settings
from services.averaged_filter_service import AveragedMatrixFilterService
from services.errors import ConfigError, FilterDivergenceError, ModelError
from services.grid_oracle_service import GridConfig, GridOracleService
from services.model_service import AveragedModel, AveragingService, ModelParams
from services.particle_filter_service import ParticleFilterService, ResamplingScheme
from services.posterior_service import Posterior
from services.rao_blackwell_service import RaoBlackwellService
from services.simulation_service import (
    FLOAT_FORMAT,
    STREAM_FILTER,
    STREAM_OBSERVATIONS,
    STREAM_PATH,
    ObservationSeries,
    RngStream,
    generate_observations,
    simulate_path,
)

logger = logging.getLogger(__name__)

FILTER_NAMES = ("optimal", "averaged", "averaged-matrix", "particle", "rb", "oracle")
REPORT_COLUMNS = ["sweep_value", "filter", "error", "stderr", "runtime_s", "seed_count"]


class FilterSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    particles: int = Field(default=100, gt=0)
    resample_threshold: float = Field(default=Settings.RESAMPLE_THRESHOLD, ge=0.0, le=1.0)
    resampling: ResamplingScheme = "multinomial"
    psi_path_samples: int = Field(default=Settings.PSI_PATH_SAMPLES, ge=1000)
    quad_order: int = Field(default=Settings.QUAD_ORDER, ge=8)
    refresh_paths: bool = False
    grid: GridConfig = Field(
        default_factory=lambda: GridConfig(
            x_cells=Settings.ORACLE_X_CELLS, v_cells=Settings.ORACLE_V_CELLS, budget=Settings.ORACLE_BUDGET
        )
    )


def run_named_filter(
    name: str,
    params: ModelParams,
    obs: ObservationSeries,
    rng: RngStream,
    settings: Optional[FilterSettings] = None,
    averaged: Optional[AveragedModel] = None,
    show_progress: bool = False,
) -> Posterior:
    """
    Dispatch one filter by name.
    - optimal: Rao-Blackwellized when h is linear and Q constant, otherwise the plain particle filter
    - averaged: particle filter on (Q_bar, h_bar)
    - averaged-matrix: matrix recursion with Monte Carlo path likelihoods
    """
    settings = settings or FilterSettings()
    if name not in FILTER_NAMES:
        raise ConfigError(f"unknown filter '{name}'", key="filter")
    particle_kwargs = dict(
        n_particles=settings.particles,
        resample_threshold=settings.resample_threshold,
        resampling=settings.resampling,
        show_progress=show_progress,
    )
    if name in ("averaged", "averaged-matrix") and averaged is None:
        averaged = AveragingService(settings.quad_order).run(params)

    if name == "rb" or (name == "optimal" and params.h.is_linear and params.q.is_constant):
        return RaoBlackwellService(params, **particle_kwargs).run(obs, rng)
    if name in ("optimal", "particle"):
        return ParticleFilterService(params, **particle_kwargs).run(obs, rng)
    if name == "averaged":
        return ParticleFilterService(params, averaged_model=averaged, **particle_kwargs).run(obs, rng)
    if name == "averaged-matrix":
        service = AveragedMatrixFilterService(
            averaged,
            obs.obs_dt,
            settings.psi_path_samples,
            refresh_paths=settings.refresh_paths,
            show_progress=show_progress,
        )
        return service.run(obs, rng, params.rho)
    return GridOracleService(params, settings.grid, show_progress=show_progress).run(obs)


def zero_one_error(truth, estimates) -> float:
    truth = np.asarray(truth)
    estimates = np.asarray(estimates)
    if truth.shape != estimates.shape:
        raise ModelError(f"sequences differ in length ({truth.size} vs {estimates.size})")
    if truth.size == 0:
        return 0.0
    return float(np.mean(truth != estimates))


class ExperimentConfig(BaseModel):
    """One sweep: a base model, the swept values, the filters and the replicate seeds."""

    model_config = ConfigDict(frozen=True)

    base: ModelParams
    name: str = "experiment"
    sweep_variable: Literal["epsilon", "m"]
    values: Tuple[float, ...]
    filters: Tuple[str, ...] = ("optimal", "averaged")
    seeds: Tuple[int, ...] = (0,)
    particle_schedule: Literal["fixed", "log2m"] = "fixed"
    fine_dt: float = Field(default=1e-4, gt=0)
    filter_settings: FilterSettings = Field(default_factory=FilterSettings)
    record_runtime: bool = False
    threads: int = Field(default=0, ge=0)
    echo: str = ""

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.values:
            raise ValueError("the sweep needs at least one value")
        if any(not math.isfinite(v) or v <= 0 for v in self.values):
            raise ValueError("sweep values must be positive")
        if self.sweep_variable == "m" and any(v != int(v) for v in self.values):
            raise ValueError("substep counts must be integers")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be nonnegative")
        unknown = [f for f in self.filters if f not in FILTER_NAMES]
        if unknown:
            raise ValueError(f"unknown filters {unknown}")
        return self

    def particles_for(self, m: int) -> int:
        if self.particle_schedule == "log2m":
            return max(1, int(round(20 * math.log2(m))))
        return self.filter_settings.particles

    def cell_params(self, value: float) -> ModelParams:
        if self.sweep_variable == "epsilon":
            return self.base.replace(epsilon=float(value))
        m = int(value)
        return self.base.replace(m=m, delta_t=m * self.fine_dt)

    def build_id(self) -> str:
        text = self.echo or self.model_dump_json(exclude={"base"})
        return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


class ReportRow(BaseModel):
    sweep_value: float
    filter: str
    error: float = Field(ge=0.0, le=1.0)
    stderr: float = Field(ge=0.0)
    runtime_s: float = Field(ge=0.0)
    seed_count: int = Field(ge=1)


class GapRow(BaseModel):
    """error(averaged) - error(optimal), paired over seeds."""

    sweep_value: float
    gap: float
    stderr: float = Field(ge=0.0)


class ErrorReport(BaseModel):
    experiment: str
    sweep_variable: str
    rows: List[ReportRow] = Field(default_factory=list)
    gaps: List[GapRow] = Field(default_factory=list)
    seeds: Tuple[int, ...] = ()
    build_id: str = ""
    argmin: Optional[float] = None
    config_echo: str = ""

    def errors(self, filter_name: str) -> np.ndarray:
        return np.array([r.error for r in self.rows if r.filter == filter_name])

    def stderrs(self, filter_name: str) -> np.ndarray:
        return np.array([r.stderr for r in self.rows if r.filter == filter_name])

    def sweep_values(self, filter_name: str) -> np.ndarray:
        return np.array([r.sweep_value for r in self.rows if r.filter == filter_name])

    def argmin_value(self, filter_name: str) -> float:
        errors = self.errors(filter_name)
        if errors.size == 0:
            raise ModelError(f"report has no rows for filter '{filter_name}'")
        return float(self.sweep_values(filter_name)[int(np.argmin(errors))])


def _run_cell(config: ExperimentConfig, value_index: int, value: float, seed: int) -> Dict[str, Tuple[float, float]]:
    """Simulate one replicate at one sweep value and score every requested filter on it."""
    # 1) Simulate the replicate
    params = config.cell_params(value)
    root = RngStream(seed=config.base.seed).derive(seed, value_index)
    path = simulate_path(params, root.derive(STREAM_PATH))
    obs = generate_observations(path, params, root.derive(STREAM_OBSERVATIONS))
    truth = path.regimes_at_observations()[1:]

    # 2) Filter settings and averaged coefficients for this cell
    settings = config.filter_settings
    if config.particle_schedule == "log2m":
        settings = settings.model_copy(update=dict(particles=config.particles_for(params.m)))
    averaged = None
    if any(f in ("averaged", "averaged-matrix") for f in config.filters):
        averaged = AveragingService(settings.quad_order).run(params)

    # 3) Run and score each filter on the same observations
    results = {}
    for name in config.filters:
        start = time.perf_counter()
        try:
            posterior = run_named_filter(
                name, params, obs, root.derive(STREAM_FILTER, FILTER_NAMES.index(name)), settings, averaged
            )
        except FilterDivergenceError as e:
            wrapped = FilterDivergenceError(f"{config.sweep_variable}={value:g}, seed={seed}, filter={name}: {e}")
            wrapped.step = e.step
            raise wrapped from e
        results[name] = (zero_one_error(truth, posterior.map_indices[1:]), time.perf_counter() - start)
    return results


def _stderr(samples: np.ndarray) -> float:
    if samples.size < 2:
        return 0.0
    return float(samples.std(ddof=1) / math.sqrt(samples.size))


def run_sweep(config: ExperimentConfig, show_progress: bool = False) -> ErrorReport:
    cells = [(vi, v, s) for vi, v in enumerate(config.values) for s in config.seeds]
    n_jobs = config.threads or Settings.THREADS or -1
    logger.info(
        f"  > Sweep '{config.name}' over {config.sweep_variable}: "
        f"{len(config.values)} values x {len(config.seeds)} seeds, filters {', '.join(config.filters)}"
    )
    outputs = Parallel(n_jobs=n_jobs, verbose=10 if show_progress else 0)(
        delayed(_run_cell)(config, vi, v, s) for vi, v, s in cells
    )

    by_cell = {(vi, s): out for (vi, _, s), out in zip(cells, outputs)}
    rows, gaps = [], []
    n_seeds = len(config.seeds)
    for vi, value in enumerate(config.values):
        per_seed = [by_cell[(vi, s)] for s in config.seeds]
        for name in config.filters:
            errors = np.array([cell[name][0] for cell in per_seed])
            runtime = float(np.mean([cell[name][1] for cell in per_seed])) if config.record_runtime else 0.0
            rows.append(
                ReportRow(
                    sweep_value=float(value),
                    filter=name,
                    error=float(errors.mean()),
                    stderr=_stderr(errors),
                    runtime_s=runtime,
                    seed_count=n_seeds,
                )
            )
        if "optimal" in config.filters and "averaged" in config.filters:
            diff = np.array([cell["averaged"][0] - cell["optimal"][0] for cell in per_seed])
            gaps.append(GapRow(sweep_value=float(value), gap=float(diff.mean()), stderr=_stderr(diff)))

    report = ErrorReport(
        experiment=config.name,
        sweep_variable=config.sweep_variable,
        rows=rows,
        gaps=gaps,
        seeds=config.seeds,
        build_id=config.build_id(),
        config_echo=config.echo,
    )
    return report


def run_epsilon_sweep(config: ExperimentConfig, show_progress: bool = False) -> ErrorReport:
    if config.sweep_variable != "epsilon":
        raise ConfigError("the epsilon sweep needs sweep = epsilon", key="sweep")
    return run_sweep(config, show_progress)


def run_delta_t_sweep(config: ExperimentConfig, show_progress: bool = False) -> ErrorReport:
    """Averaged-filter error against m at a fixed fine step; the report carries the best m."""
    if config.sweep_variable != "m":
        raise ConfigError("the observation-interval sweep needs sweep = m", key="sweep")
    report = run_sweep(config, show_progress)
    target = "averaged" if "averaged" in config.filters else (config.filters[0] if config.filters else None)
    if target is not None:
        report = report.model_copy(update=dict(argmin=report.argmin_value(target)))
        logger.info(
            f"  > Lowest {target} error at m={report.argmin:g} (dt={report.argmin * config.fine_dt:g})"
        )
    return report


def report_path(report: ErrorReport, directory, fmt: Literal["csv", "json"]) -> Path:
    sweep = "dt" if report.sweep_variable == "m" else report.sweep_variable
    return Path(directory) / f"{report.experiment}_{sweep}.{fmt}"


def write_report(report: ErrorReport, directory, fmt: Literal["csv", "json"] = "csv") -> Path:
    target = report_path(report, directory, fmt)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            frame = pd.DataFrame([r.model_dump() for r in report.rows], columns=REPORT_COLUMNS)
            frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
        elif fmt == "json":
            with open(target, "w", encoding="utf-8") as f:
                json.dump(report.model_dump(mode="json"), f, ensure_ascii=False, indent=2, sort_keys=True)
                f.write("\n")
        else:
            raise ConfigError(f"unknown report format '{fmt}'", key="format")
    except OSError as e:
        raise ConfigError(f"cannot write report: {e}", source=str(target)) from e
    logger.info(f"  > Report saved to {target}")
    return target


def read_report_csv(source) -> List[ReportRow]:
    try:
        frame = pd.read_csv(source, dtype={"filter": str})
    except (OSError, pd.errors.ParserError) as e:
        raise ConfigError(f"cannot read report: {e}", source=str(source)) from e
    if list(frame.columns) != REPORT_COLUMNS:
        raise ConfigError(f"unexpected report columns {','.join(frame.columns)}", line=1, source=str(source))
    return [ReportRow.model_validate(record) for record in frame.to_dict(orient="records")]
