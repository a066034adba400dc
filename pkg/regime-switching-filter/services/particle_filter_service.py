from __future__ import annotations
from typing import Literal, Optional, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp
from tqdm import tqdm

from services.errors import FilterDivergenceError, ModelError
from services.model_service import (
    AveragedModel,
    ModelParams,
    chain_transition_matrices,
    chain_transition_matrix,
)
from services.posterior_service import Posterior, normalize_log
from services.simulation_service import ObservationSeries, RngStream, chain_step_many, ou_step

logger = logging.getLogger(__name__)

ResamplingScheme = Literal["multinomial", "systematic"]


class ParticleEnsemble(BaseModel):
    """
    Weighted particles for the regime chain.
    - x: per-particle OU values (full particle filter)
    - means: per-particle conditional Gaussian means (Rao-Blackwellized filter)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta: np.ndarray
    log_weights: np.ndarray
    x: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    resample_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    last_ess: float = math.nan
    resampled: bool = False

    @model_validator(mode="after")
    def _check(self) -> "ParticleEnsemble":
        R = self.theta.size
        if R < 1:
            raise ValueError("an ensemble needs at least one particle")
        if self.log_weights.shape != (R,):
            raise ValueError("one log-weight per particle is required")
        if self.x is not None and self.x.shape[0] != R:
            raise ValueError("one OU value per particle is required")
        if self.means is not None and self.means.shape[0] != R:
            raise ValueError("one mean vector per particle is required")
        if abs(logsumexp(self.log_weights)) > 1e-10:
            raise ValueError("weights must sum to 1")
        return self

    @classmethod
    def uniform(cls, theta: np.ndarray, x=None, means=None, resample_threshold: float = 0.5) -> "ParticleEnsemble":
        R = theta.size
        return cls(
            theta=theta,
            log_weights=np.full(R, -math.log(R)),
            x=x,
            means=means,
            resample_threshold=resample_threshold,
        )

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def regime_marginal(self, n_states: int) -> np.ndarray:
        pi = np.bincount(self.theta, weights=self.weights, minlength=n_states)
        return pi / pi.sum()


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample_sir(
    ensemble: ParticleEnsemble,
    rng: np.random.Generator,
    method: ResamplingScheme = "multinomial",
) -> ParticleEnsemble:
    """Draw R ancestors with probability proportional to weight; weights reset to 1/R."""
    w = np.exp(ensemble.log_weights)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise FilterDivergenceError("cannot resample an ensemble with zero total weight")
    R = ensemble.size
    cdf = np.cumsum(w)
    if method == "multinomial":
        positions = rng.random(R) * cdf[-1]
    elif method == "systematic":
        positions = (rng.random() + np.arange(R)) / R * cdf[-1]
    else:
        raise ModelError(f"unknown resampling scheme '{method}'")
    idx = np.minimum(np.searchsorted(cdf, positions, side="right"), R - 1)
    return ensemble.model_copy(
        update=dict(
            theta=ensemble.theta[idx],
            x=None if ensemble.x is None else ensemble.x[idx],
            means=None if ensemble.means is None else ensemble.means[idx],
            log_weights=np.full(R, -math.log(R)),
            resampled=True,
        )
    )


def _update_log_weights(
    log_weights: np.ndarray, loglik: np.ndarray, step: Optional[int], log_space: bool
) -> Tuple[np.ndarray, np.ndarray]:
    if log_space:
        lw = log_weights + loglik
        w, c = normalize_log(lw)
        if not np.isfinite(c):
            raise FilterDivergenceError("total particle weight vanished", step)
        return lw - c, w
    w = np.exp(log_weights) * np.exp(loglik)
    c = w.sum()
    if not np.isfinite(c) or c <= 0:
        raise FilterDivergenceError("total particle weight vanished", step)
    w = w / c
    with np.errstate(divide="ignore"):
        return np.log(w), w


def _finish_step(
    ensemble: ParticleEnsemble,
    loglik: np.ndarray,
    n_states: int,
    rng: np.random.Generator,
    step: Optional[int],
    log_space: bool,
    resampling: ResamplingScheme,
    **fields,
) -> Tuple[ParticleEnsemble, np.ndarray, np.ndarray]:
    """Reweight, read off the regime marginal, then resample if the ESS dropped."""
    log_w, w = _update_log_weights(ensemble.log_weights, loglik, step, log_space)
    ess = effective_sample_size(w)
    updated = ensemble.model_copy(update=dict(log_weights=log_w, last_ess=ess, resampled=False, **fields))
    pi = updated.regime_marginal(n_states)
    if ess <= ensemble.resample_threshold * ensemble.size:
        updated = resample_sir(updated, rng, resampling)
    return updated, pi, w


def _substep_transition(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if params.q.is_constant:
        return chain_transition_matrix(params.q.matrix, params.fine_dt)
    return chain_transition_matrices(params.q.evaluate(x), params.fine_dt)


def particle_filter_step(
    ensemble: ParticleEnsemble,
    y_prev: float,
    y_next: float,
    params: ModelParams,
    rng: np.random.Generator,
    transition: Optional[np.ndarray] = None,
    step: Optional[int] = None,
    log_space: bool = True,
    resampling: ResamplingScheme = "multinomial",
) -> Tuple[ParticleEnsemble, np.ndarray]:
    """Propagate (Theta, X) through m exact substeps, weight by the Gaussian increment likelihood."""
    if ensemble.x is None:
        raise ModelError("the particle filter needs an OU value per particle")
    R = ensemble.size
    levels = params.space.levels
    a = params.ar_coefficient
    theta = ensemble.theta
    x = ensemble.x
    acc = np.zeros(R)
    for _ in range(params.m):
        p = transition if transition is not None else _substep_transition(params, x)
        theta = chain_step_many(theta, p, rng.random(R))
        x = ou_step(x, levels[theta], a, rng.standard_normal(R))
        acc += params.h(x)
    loglik = -((y_next - y_prev - params.fine_dt * acc) ** 2) / (2.0 * params.delta_t)
    updated, pi, _ = _finish_step(
        ensemble, loglik, params.space.size, rng, step, log_space, resampling, theta=theta, x=x
    )
    return updated, pi


def averaged_particle_filter_step(
    ensemble: ParticleEnsemble,
    y_prev: float,
    y_next: float,
    averaged: AveragedModel,
    params: ModelParams,
    rng: np.random.Generator,
    transition: Optional[np.ndarray] = None,
    step: Optional[int] = None,
    log_space: bool = True,
    resampling: ResamplingScheme = "multinomial",
) -> Tuple[ParticleEnsemble, np.ndarray]:
    """Same recursion on the averaged chain alone; X is integrated out through h_bar."""
    R = ensemble.size
    p = transition if transition is not None else chain_transition_matrix(averaged.q_bar, params.fine_dt)
    theta = ensemble.theta
    acc = np.zeros(R)
    for _ in range(params.m):
        theta = chain_step_many(theta, p, rng.random(R))
        acc += averaged.h_bar[theta]
    loglik = -((y_next - y_prev - params.fine_dt * acc) ** 2) / (2.0 * params.delta_t)
    updated, pi, _ = _finish_step(ensemble, loglik, averaged.size, rng, step, log_space, resampling, theta=theta)
    return updated, pi


def initial_regimes(params: ModelParams, rng: np.random.Generator, n_particles: int) -> np.ndarray:
    cdf = np.cumsum(params.rho)
    return np.minimum(np.searchsorted(cdf, rng.random(n_particles), side="right"), params.space.size - 1)


class ParticleFilterService:
    """
    Sequential importance resampling for the full model or the averaged model.
    - averaged=False: particles carry (Theta, X) and see the exact OU dynamics
    - averaged=True: particles carry Theta only and see (Q_bar, h_bar)
    """

    def __init__(
        self,
        params: ModelParams,
        n_particles: int = 100,
        resample_threshold: float = 0.5,
        resampling: ResamplingScheme = "multinomial",
        averaged_model: Optional[AveragedModel] = None,
        log_space: bool = True,
        show_progress: bool = False,
    ):
        if n_particles < 1:
            raise ModelError("the particle filter needs at least one particle")
        self.params = params
        self.n_particles = n_particles
        self.resample_threshold = resample_threshold
        self.resampling = resampling
        self.averaged_model = averaged_model
        self.log_space = log_space
        self.show_progress = show_progress

    @property
    def name(self) -> str:
        return "averaged" if self.averaged_model is not None else "optimal"

    def initial_ensemble(self, gen: np.random.Generator) -> ParticleEnsemble:
        theta = initial_regimes(self.params, gen, self.n_particles)
        x = None
        if self.averaged_model is None:
            x = self.params.x0_law.sample(gen, self.n_particles)
        return ParticleEnsemble.uniform(theta, x=x, resample_threshold=self.resample_threshold)

    def run(self, obs: ObservationSeries, rng: RngStream) -> Posterior:
        gen = rng.generator()
        params = self.params
        M = params.space.size
        # 1) Initial ensemble from rho0 and the x0 law
        ensemble = self.initial_ensemble(gen)

        # 2) Substep transition, shared when Q does not depend on x
        transition = None
        if self.averaged_model is not None:
            transition = chain_transition_matrix(self.averaged_model.q_bar, params.fine_dt)
        elif params.q.is_constant:
            transition = chain_transition_matrix(params.q.matrix, params.fine_dt)

        # 3) Recursion over observation intervals
        N = obs.n_obs
        probs = np.empty((N + 1, M))
        probs[0] = params.rho
        ess = np.empty(N)
        resampled = np.zeros(N, dtype=bool)
        y = obs.y

        steps = range(N)
        if self.show_progress:
            steps = tqdm(steps, desc=f"{self.name} filter", leave=False)
        for k in steps:
            if self.averaged_model is not None:
                ensemble, pi = averaged_particle_filter_step(
                    ensemble, y[k], y[k + 1], self.averaged_model, params, gen,
                    transition=transition, step=k + 1, log_space=self.log_space, resampling=self.resampling,
                )
            else:
                ensemble, pi = particle_filter_step(
                    ensemble, y[k], y[k + 1], params, gen,
                    transition=transition, step=k + 1, log_space=self.log_space, resampling=self.resampling,
                )
            probs[k + 1] = pi
            ess[k] = ensemble.last_ess
            resampled[k] = ensemble.resampled

        logger.info(f"  > {self.name} filter: {N} steps, {self.n_particles} particles, {int(resampled.sum())} resamplings")
        return Posterior(probs=probs, obs_dt=obs.obs_dt, filter_name=self.name, ess=ess, resampled=resampled)
