from __future__ import annotations
from typing import Optional
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from services.averaged_filter_service import (
    AveragedMatrixFilterService,
    MIN_PATH_SAMPLES,
    _joint_matrix,
    sample_path_bank,
)
from services.errors import ConfigError, ModelError
from services.model_service import AveragedModel, AveragingService, ModelParams
from services.posterior_service import Posterior
from services.simulation_service import ObservationSeries, RngStream

logger = logging.getLogger(__name__)


class SvolParams(BaseModel):
    """Drift r and leverage correlation rho of the stochastic-volatility observation."""

    model_config = ConfigDict(frozen=True)

    r: float = 0.0
    rho: float = Field(default=0.0, gt=-1.0, le=0.0)

    def check(self, epsilon: float) -> None:
        if epsilon * self.rho**2 >= 1.0:
            raise ModelError("the volatility model needs eps * rho^2 < 1")


class SvolKernel:
    """Log-normal return density given the integrated variance I over the interval."""

    name = "svol"

    def __init__(self, dt: float, r: float = 0.0):
        self.dt = dt
        self.r = r

    def log_kernel(self, dy: float, integrals: np.ndarray) -> np.ndarray:
        integrals = np.asarray(integrals, dtype=float)
        if np.any(integrals <= 0):
            raise ModelError("integrated variance must be positive")
        return -((dy - self.r * self.dt + 0.5 * integrals) ** 2) / (2.0 * integrals) - 0.5 * np.log(integrals * self.dt)


def _check_averaged(averaged: AveragedModel) -> None:
    if np.any(averaged.h_bar <= 0):
        raise ModelError("the volatility model needs a strictly positive averaged variance")


def svol_psi(
    averaged: AveragedModel,
    y_prev: float,
    y_next: float,
    dt: float,
    r: float,
    path_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Kernel-times-endpoint matrix of the volatility model for one return."""
    _check_averaged(averaged)
    if path_samples < MIN_PATH_SAMPLES:
        raise ModelError(f"psi estimation needs at least {MIN_PATH_SAMPLES} paths per start state")
    bank = sample_path_bank(averaged, dt, path_samples, rng)
    joint, _, _, _ = _joint_matrix(bank, SvolKernel(dt, r), y_next - y_prev, shift=0.0)
    return joint


def svol_averaged_filter(
    obs: ObservationSeries,
    averaged: AveragedModel,
    svol: SvolParams,
    dt: float,
    path_samples: int,
    rng: RngStream,
    rho0=None,
    refresh_paths: bool = False,
) -> Posterior:
    _check_averaged(averaged)
    service = AveragedMatrixFilterService(
        averaged, dt, path_samples, kernel=SvolKernel(dt, svol.r), refresh_paths=refresh_paths, name="svol-averaged"
    )
    return service.run(obs, rng, rho0)


def read_log_prices(source, obs_dt: Optional[float] = None) -> ObservationSeries:
    """A price file with columns timestamp,log_price at a uniform spacing."""
    try:
        frame = pd.read_csv(source)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read prices: {e}", source=str(source)) from e
    if list(frame.columns) != ["timestamp", "log_price"]:
        raise ConfigError(
            f"expected columns timestamp,log_price, found {','.join(map(str, frame.columns))}",
            line=1,
            source=str(source),
        )
    t = frame["timestamp"].to_numpy(dtype=float)
    if t.size < 2:
        raise ConfigError("a price file needs at least two rows", source=str(source))
    gaps = np.diff(t)
    if np.any(gaps <= 0) or np.max(np.abs(gaps - gaps[0])) > 1e-9 * max(1.0, abs(gaps[0])):
        raise ConfigError("timestamps must be strictly increasing and uniformly spaced", key="timestamp", source=str(source))
    dt = float(gaps[0]) if obs_dt is None else obs_dt
    return ObservationSeries(y=frame["log_price"].to_numpy(dtype=float), obs_dt=dt)


class SvolFilterService:
    """Regime filter on log prices whose variance is driven by the fast factor."""

    def __init__(
        self,
        params: ModelParams,
        svol: SvolParams,
        path_samples: int = 2000,
        quad_order: int = 64,
        refresh_paths: bool = False,
    ):
        if not params.h.is_positive:
            raise ModelError("the volatility model needs an observation function bounded below by a positive constant")
        svol.check(params.epsilon)
        self.params = params
        self.svol = svol
        self.path_samples = path_samples
        self.refresh_paths = refresh_paths
        self.averaged = AveragingService(quad_order).run(params)

    def run(self, obs: ObservationSeries, rng: RngStream) -> Posterior:
        logger.info(
            f"  > svol filter: r={self.svol.r:g}, rho={self.svol.rho:g}, "
            f"h_bar={self.averaged.h_bar}, leverage={self.averaged.leverage}"
        )
        return svol_averaged_filter(
            obs, self.averaged, self.svol, obs.obs_dt, self.path_samples, rng, self.params.rho, self.refresh_paths
        )
