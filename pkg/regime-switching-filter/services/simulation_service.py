from __future__ import annotations
from bisect import bisect_right
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Optional, Tuple
import logging
import math

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.errors import ConfigError, ModelError
from services.model_service import ModelParams, chain_transition_matrix

if TYPE_CHECKING:
    from services.svol_service import SvolParams

logger = logging.getLogger(__name__)

STREAM_PATH = 0
STREAM_OBSERVATIONS = 1
STREAM_FILTER = 2
STREAM_PSI = 3
STREAM_RETURNS = 4

FLOAT_FORMAT = "%.17g"


class RngStream(BaseModel):
    """A named, reproducible PCG64 stream: (seed, spawn key) fully determines the draws."""

    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, lt=2**64)
    spawn_key: Tuple[int, ...] = ()

    @property
    def stream_id(self) -> int:
        return self.spawn_key[-1] if self.spawn_key else 0

    def derive(self, *keys: int) -> "RngStream":
        return RngStream(seed=self.seed, spawn_key=self.spawn_key + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        return np.random.Generator(np.random.PCG64(seq))


class NoiseHooks(BaseModel):
    """Switches that zero individual noise sources, for deterministic checks."""

    model_config = ConfigDict(frozen=True)

    ou_noise: bool = True
    observation_noise: bool = True
    chain_jumps: bool = True


class PathBlock(BaseModel):
    """Fine-grid values of one observation interval: indices mk+1..m(k+1)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    k: int
    start_theta: int
    start_x: float
    theta: np.ndarray
    x: np.ndarray
    noise: np.ndarray


class HiddenPath(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    theta: np.ndarray
    x: np.ndarray
    noise: np.ndarray
    fine_dt: float
    m: int

    @model_validator(mode="after")
    def _check(self) -> "HiddenPath":
        n = self.theta.size
        if self.x.size != n or self.noise.size != n - 1:
            raise ValueError("path arrays have inconsistent lengths")
        if (n - 1) % self.m != 0:
            raise ValueError("path length is not a whole number of observation intervals")
        return self

    @property
    def n_obs(self) -> int:
        return (self.theta.size - 1) // self.m

    def regimes_at_observations(self) -> np.ndarray:
        return self.theta[:: self.m]


class ObservationSeries(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    y: np.ndarray
    obs_dt: float = Field(gt=0)

    @model_validator(mode="after")
    def _check(self) -> "ObservationSeries":
        if self.y.ndim != 1 or self.y.size < 1:
            raise ValueError("observations must be a non-empty 1-D series")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")
        return self

    @property
    def n_obs(self) -> int:
        return self.y.size - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.y)


def ou_step(x, theta_value, a: float, noise):
    """Exact OU transition over one fine step: a x + (1 - a) theta + sqrt((1 - a^2)/2) W."""
    if not 0 < a <= 1:
        raise ModelError(f"autoregressive coefficient must lie in (0, 1], got {a}")
    return a * x + (1.0 - a) * theta_value + math.sqrt((1.0 - a * a) / 2.0) * noise


def chain_step(current: int, p: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from row `current` of P; u = 0 maps to the first positive-mass state."""
    p = np.asarray(p, dtype=float)
    if not 0 <= current < p.shape[0]:
        raise ModelError(f"regime index {current} out of range")
    if not 0 <= u < 1:
        raise ModelError("uniform draw must lie in [0, 1)")
    cdf = np.cumsum(p[current])
    return min(int(np.searchsorted(cdf, u, side="right")), p.shape[0] - 1)


def chain_step_many(current: np.ndarray, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorised chain_step; p is one (M, M) matrix or one per particle (R, M, M)."""
    if p.ndim == 3:
        rows = p[np.arange(current.size), current]
    else:
        rows = p[current]
    cdf = np.cumsum(rows, axis=1)
    j = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(j, p.shape[-1] - 1)


def _inverse_cdf(cdf_row, u: float) -> int:
    return min(bisect_right(cdf_row, u), len(cdf_row) - 1)


def iter_path_blocks(
    params: ModelParams,
    rng: RngStream,
    hooks: Optional[NoiseHooks] = None,
) -> Iterator[PathBlock]:
    """Exact joint simulation of (Theta, X) on the fine grid, one observation interval at a time."""
    hooks = hooks or NoiseHooks()
    gen = rng.generator()
    m = params.m
    a = params.ar_coefficient
    levels = params.space.levels.tolist()

    theta = _inverse_cdf(np.cumsum(params.rho).tolist(), gen.random())
    x = float(params.x0_law.sample(gen, 1)[0])

    cdf_rows = None
    if params.q.is_constant:
        cdf_rows = np.cumsum(chain_transition_matrix(params.q.matrix, params.fine_dt), axis=1).tolist()

    for k in range(params.n_obs):
        start_theta, start_x = theta, x
        u = gen.random(m).tolist()
        w = gen.standard_normal(m)
        if not hooks.ou_noise:
            w = np.zeros(m)
        w_list = w.tolist()
        thetas = np.empty(m, dtype=np.int64)
        xs = np.empty(m)
        for j in range(m):
            if hooks.chain_jumps:
                if cdf_rows is not None:
                    theta = _inverse_cdf(cdf_rows[theta], u[j])
                else:
                    p = chain_transition_matrix(params.q.evaluate([x])[0], params.fine_dt)
                    theta = _inverse_cdf(np.cumsum(p[theta]).tolist(), u[j])
            x = ou_step(x, levels[theta], a, w_list[j])
            thetas[j] = theta
            xs[j] = x
        yield PathBlock(k=k, start_theta=start_theta, start_x=start_x, theta=thetas, x=xs, noise=w)


def simulate_path(params: ModelParams, rng: RngStream, hooks: Optional[NoiseHooks] = None) -> HiddenPath:
    n = params.m * params.n_obs + 1
    theta = np.empty(n, dtype=np.int64)
    x = np.empty(n)
    noise = np.empty(n - 1)
    m = params.m
    for block in iter_path_blocks(params, rng, hooks):
        lo = m * block.k
        if block.k == 0:
            theta[0] = block.start_theta
            x[0] = block.start_x
        theta[lo + 1 : lo + m + 1] = block.theta
        x[lo + 1 : lo + m + 1] = block.x
        noise[lo : lo + m] = block.noise
    return HiddenPath(theta=theta, x=x, noise=noise, fine_dt=params.fine_dt, m=m)


def _check_path(path: HiddenPath, params: ModelParams) -> None:
    if path.m != params.m or path.n_obs != params.n_obs:
        raise ModelError(
            f"path has m={path.m}, N={path.n_obs} but the model asks for m={params.m}, N={params.n_obs}"
        )


def generate_observations(
    path: HiddenPath,
    params: ModelParams,
    rng: RngStream,
    hooks: Optional[NoiseHooks] = None,
) -> ObservationSeries:
    """Y_{k+1} = Y_k + dt~ sum_l h(X_l) + sqrt(dt) Z_k, right-point Riemann sum over the block."""
    hooks = hooks or NoiseHooks()
    _check_path(path, params)
    N, m = params.n_obs, params.m
    signal = params.fine_dt * params.h(path.x[1:]).reshape(N, m).sum(axis=1)
    if hooks.observation_noise:
        dz = math.sqrt(params.delta_t) * rng.generator().standard_normal(N)
    else:
        dz = np.zeros(N)
    y = np.empty(N + 1)
    y[0] = params.v0
    y[1:] = params.v0 + np.cumsum(signal + dz)
    return ObservationSeries(y=y, obs_dt=params.delta_t)


def simulate_svol_returns(
    path: HiddenPath,
    params: ModelParams,
    svol: "SvolParams",
    rng: RngStream,
    hooks: Optional[NoiseHooks] = None,
) -> ObservationSeries:
    """
    Log prices of the volatility model, driven by the path's own OU noise for the leverage term.
    - integral: right-point sum of h(X) over the block
    - leverage: left-point sum of sqrt(h(X)) dW
    """
    hooks = hooks or NoiseHooks()
    _check_path(path, params)
    svol.check(params.epsilon)
    hx = params.h(path.x)
    if not np.all(np.isfinite(hx)) or np.any(hx <= 0):
        raise ModelError("the volatility model needs a strictly positive observation function")
    N, m, dt = params.n_obs, params.m, params.delta_t
    integral = params.fine_dt * hx[1:].reshape(N, m).sum(axis=1)
    dw = math.sqrt(params.fine_dt) * path.noise
    leverage = (np.sqrt(hx[:-1]) * dw).reshape(N, m).sum(axis=1)
    if hooks.observation_noise:
        z = rng.generator().standard_normal(N)
    else:
        z = np.zeros(N)
    rho = svol.rho
    increments = (
        svol.r * dt
        - 0.5 * integral
        + math.sqrt(params.epsilon) * rho * leverage
        + np.sqrt((1.0 - params.epsilon * rho * rho) * integral) * z
    )
    y = np.empty(N + 1)
    y[0] = params.v0
    y[1:] = params.v0 + np.cumsum(increments)
    return ObservationSeries(y=y, obs_dt=dt)


def write_path_csv(path: HiddenPath, target) -> Path:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    l = np.arange(path.theta.size)
    frame = pd.DataFrame({"l": l, "t": l * path.fine_dt, "theta": path.theta, "x": path.x})
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
    return target


def write_observations_csv(obs: ObservationSeries, target) -> Path:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    k = np.arange(obs.y.size)
    frame = pd.DataFrame({"k": k, "t": k * obs.obs_dt, "y": obs.y})
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
    return target


def _read_csv(source, columns) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read CSV: {e}", source=str(source)) from e
    if list(frame.columns) != list(columns):
        raise ConfigError(
            f"expected columns {','.join(columns)}, found {','.join(map(str, frame.columns))}",
            line=1,
            source=str(source),
        )
    if frame.empty:
        raise ConfigError("file has no data rows", source=str(source))
    return frame


def read_observations_csv(source, obs_dt: Optional[float] = None) -> ObservationSeries:
    frame = _read_csv(source, ["k", "t", "y"])
    if obs_dt is None:
        t = frame["t"].to_numpy(dtype=float)
        if t.size < 2:
            raise ConfigError("cannot infer the observation interval from a single row", source=str(source))
        obs_dt = float(t[1] - t[0])
    try:
        return ObservationSeries(y=frame["y"].to_numpy(dtype=float), obs_dt=obs_dt)
    except ValueError as e:
        raise ConfigError(str(e), key="y", source=str(source)) from e


def read_path_csv(source, m: int) -> HiddenPath:
    frame = _read_csv(source, ["l", "t", "theta", "x"])
    t = frame["t"].to_numpy(dtype=float)
    fine_dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    theta = frame["theta"].to_numpy(dtype=np.int64)
    x = frame["x"].to_numpy(dtype=float)
    try:
        return HiddenPath(theta=theta, x=x, noise=np.zeros(theta.size - 1), fine_dt=fine_dt, m=m)
    except ValueError as e:
        raise ConfigError(str(e), source=str(source)) from e


class SimulationService:
    """Simulates a path and its observations from one seed, each on its own named stream."""

    def __init__(self, params: ModelParams, hooks: Optional[NoiseHooks] = None):
        self.params = params
        self.hooks = hooks or NoiseHooks()

    def run(self, seed: Optional[int] = None) -> Tuple[HiddenPath, ObservationSeries]:
        root = RngStream(seed=self.params.seed if seed is None else seed)
        logger.info(
            f"  > Simulating {self.params.n_obs} observations "
            f"(m={self.params.m}, eps={self.params.epsilon:g}, dt={self.params.delta_t:g})"
        )
        path = simulate_path(self.params, root.derive(STREAM_PATH), self.hooks)
        obs = generate_observations(path, self.params, root.derive(STREAM_OBSERVATIONS), self.hooks)
        return path, obs
