from __future__ import annotations
from typing import Optional, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from services.errors import ModelError, NumericalError
from services.model_service import ModelParams, chain_transition_matrix
from services.particle_filter_service import (
    ParticleEnsemble,
    ResamplingScheme,
    _finish_step,
    initial_regimes,
)
from services.posterior_service import Posterior
from services.simulation_service import ObservationSeries, RngStream, chain_step_many

logger = logging.getLogger(__name__)


def rb_build_matrices(params: ModelParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Linear-Gaussian form of one observation interval for the stacked vector
    (X_{(k+1)m}, ..., X_{km+1}); column c stands for time (k+1)m - c.
      X_next = A X_prev + B theta_path + R_mat W,    dY = H X_next + sqrt(dt) Z
    """
    if not params.h.is_linear:
        raise ModelError("the Rao-Blackwellized filter needs a linear observation function")
    m = params.m
    a = params.ar_coefficient
    rows = np.arange(m)
    lag = rows[None, :] - rows[:, None]
    upper = np.where(lag >= 0, a ** np.maximum(lag, 0), 0.0)
    A = np.zeros((m, m))
    A[:, 0] = a ** (m - rows)
    B = (1.0 - a) * upper
    R_mat = math.sqrt((1.0 - a * a) / 2.0) * upper
    H = params.fine_dt * params.h.slope * np.ones(m)
    return A, B, R_mat, H


class RbSufficientStats(BaseModel):
    """Kalman covariance state, shared by every particle since it does not depend on the data."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    A: np.ndarray
    B: np.ndarray
    R_mat: np.ndarray
    H: np.ndarray
    obs_var: float
    sigma: np.ndarray
    sigma_pred: Optional[np.ndarray] = None
    innovation_var: Optional[float] = None
    gain: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, params: ModelParams, x0_variance: float = 0.0) -> "RbSufficientStats":
        A, B, R_mat, H = rb_build_matrices(params)
        sigma = np.zeros((params.m, params.m))
        sigma[0, 0] = x0_variance
        return cls(A=A, B=B, R_mat=R_mat, H=H, obs_var=params.delta_t, sigma=sigma)

    def advance(self) -> "RbSufficientStats":
        A, H = self.A, self.H
        sigma_pred = A @ self.sigma @ A.T + self.R_mat @ self.R_mat.T
        sigma_pred = 0.5 * (sigma_pred + sigma_pred.T)
        s = float(H @ sigma_pred @ H) + self.obs_var
        if not s > 0:
            raise NumericalError(f"innovation variance is not positive ({s})")
        gain = sigma_pred @ H / s
        sigma = sigma_pred - np.outer(gain, H @ sigma_pred)
        sigma = 0.5 * (sigma + sigma.T)
        return self.model_copy(update=dict(sigma=sigma, sigma_pred=sigma_pred, innovation_var=s, gain=gain))


def rb_filter_step(
    ensemble: ParticleEnsemble,
    stats: RbSufficientStats,
    y_prev: float,
    y_next: float,
    params: ModelParams,
    rng: np.random.Generator,
    transition: Optional[np.ndarray] = None,
    step: Optional[int] = None,
    log_space: bool = True,
    resampling: ResamplingScheme = "multinomial",
) -> Tuple[ParticleEnsemble, RbSufficientStats, np.ndarray, float]:
    """Sample the regime path, run the Kalman update per particle, weight by the innovation."""
    if ensemble.means is None:
        raise ModelError("the Rao-Blackwellized filter needs a mean vector per particle")
    R, m = ensemble.size, params.m
    stats = stats.advance()
    p = transition if transition is not None else chain_transition_matrix(params.q.matrix, params.fine_dt)
    levels = params.space.levels

    theta = ensemble.theta
    path = np.empty((R, m), dtype=np.int64)
    for j in range(m):
        theta = chain_step_many(theta, p, rng.random(R))
        path[:, m - 1 - j] = theta

    pred = ensemble.means @ stats.A.T + levels[path] @ stats.B.T
    innovation = (y_next - y_prev) - pred @ stats.H
    loglik = -(innovation**2) / (2.0 * stats.innovation_var)
    means = pred + innovation[:, None] * stats.gain[None, :]

    updated, pi, w = _finish_step(
        ensemble, loglik, params.space.size, rng, step, log_space, resampling, theta=theta, means=means
    )
    return updated, stats, pi, float(w @ means[:, 0])


class RaoBlackwellService:
    """
    Particles on the regime path only; X is handled exactly by a Kalman filter per particle.
    Uniform and point initial laws are sampled per particle (zero initial covariance);
    a gaussian initial law enters the covariance directly.
    """

    def __init__(
        self,
        params: ModelParams,
        n_particles: int = 100,
        resample_threshold: float = 0.5,
        resampling: ResamplingScheme = "multinomial",
        log_space: bool = True,
        show_progress: bool = False,
    ):
        if not params.h.is_linear:
            raise ModelError("the Rao-Blackwellized filter needs a linear observation function")
        if not params.q.is_constant:
            raise ModelError("the Rao-Blackwellized filter needs constant intensities")
        self.params = params
        self.n_particles = n_particles
        self.resample_threshold = resample_threshold
        self.resampling = resampling
        self.log_space = log_space
        self.show_progress = show_progress

    def initial_state(self, gen: np.random.Generator) -> Tuple[ParticleEnsemble, RbSufficientStats]:
        params, R = self.params, self.n_particles
        law = params.x0_law
        means = np.zeros((R, params.m))
        if law.kind == "gaussian":
            means[:, 0] = law.mean()
            variance = law.variance()
        else:
            means[:, 0] = law.sample(gen, R)
            variance = 0.0
        theta = initial_regimes(params, gen, R)
        ensemble = ParticleEnsemble.uniform(theta, means=means, resample_threshold=self.resample_threshold)
        return ensemble, RbSufficientStats.initial(params, variance)

    def run(self, obs: ObservationSeries, rng: RngStream) -> Posterior:
        gen = rng.generator()
        params = self.params
        # 1) Initial ensemble and shared Kalman state
        ensemble, stats = self.initial_state(gen)
        transition = chain_transition_matrix(params.q.matrix, params.fine_dt)

        # 2) Recursion over observation intervals
        N = obs.n_obs
        probs = np.empty((N + 1, params.space.size))
        probs[0] = params.rho
        means = np.empty(N + 1)
        means[0] = params.x0_law.mean()
        ess = np.empty(N)
        resampled = np.zeros(N, dtype=bool)

        steps = range(N)
        if self.show_progress:
            steps = tqdm(steps, desc="rb filter", leave=False)
        for k in steps:
            ensemble, stats, pi, mean = rb_filter_step(
                ensemble, stats, obs.y[k], obs.y[k + 1], params, gen,
                transition=transition, step=k + 1, log_space=self.log_space, resampling=self.resampling,
            )
            probs[k + 1] = pi
            means[k + 1] = mean
            ess[k] = ensemble.last_ess
            resampled[k] = ensemble.resampled

        # 3) Posterior with ESS trace
        logger.info(f"  > rb filter: {N} steps, {self.n_particles} particles, {int(resampled.sum())} resamplings")
        return Posterior(probs=probs, obs_dt=obs.obs_dt, filter_name="rb", means=means, ess=ess, resampled=resampled)
