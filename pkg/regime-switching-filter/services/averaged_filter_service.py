from __future__ import annotations
from typing import Optional, Protocol, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from services.errors import FilterDivergenceError, ModelError
from services.model_service import AveragedModel
from services.posterior_service import Posterior
from services.simulation_service import STREAM_PSI, ObservationSeries, RngStream, chain_step_many

logger = logging.getLogger(__name__)

MIN_PATH_SAMPLES = 1000
BRIDGE_NODES = 64


class PathKernel(Protocol):
    name: str

    def log_kernel(self, dy: float, integrals: np.ndarray) -> np.ndarray: ...


class GaussianKernel:
    """exp(-(dy - I)^2 / (2 dt)) for additive observation noise."""

    name = "gaussian"

    def __init__(self, dt: float):
        self.dt = dt

    def log_kernel(self, dy: float, integrals: np.ndarray) -> np.ndarray:
        return -((dy - integrals) ** 2) / (2.0 * self.dt)


class PathBank(BaseModel):
    """
    Exact paths of the averaged chain over one observation interval, `path_samples` per start state.
    - integrals[j, p] = int_0^dt h_bar(Theta) for path p started in j
    - bridge_integrals[j, i, g]: single jump j -> i at the g-th midpoint, used for unvisited endpoints

    With three or more regimes an unvisited endpoint may only be reachable through
    intermediate states; the bridge still scores it as one direct jump. The joint entry
    is P(j -> i) times that mean, so the error never exceeds P(j -> i) times the largest
    kernel value, and P(j -> i) is small whenever no sampled path reached i.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    endpoints: np.ndarray
    integrals: np.ndarray
    transition: np.ndarray
    bridge_integrals: np.ndarray
    dt: float = Field(gt=0)

    @property
    def size(self) -> int:
        return self.endpoints.shape[0]

    @property
    def path_samples(self) -> int:
        return self.endpoints.shape[1]

    def endpoint_frequencies(self) -> np.ndarray:
        """freq[i, j] = share of paths from j that end in i."""
        M = self.size
        return np.stack([np.bincount(self.endpoints[j], minlength=M) for j in range(M)], axis=1) / self.path_samples


class PsiMatrix(BaseModel):
    """
    psi[i, j] = E[kernel | start j, end i]; NaN where no sampled path ended in i.
    stderr is the Monte Carlo standard error of each entry, NaN below two paths.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    psi: np.ndarray
    present: np.ndarray
    stderr: np.ndarray
    path_samples: int

    @property
    def absent(self) -> np.ndarray:
        return ~self.present


def sample_path_bank(averaged: AveragedModel, dt: float, path_samples: int, rng: np.random.Generator) -> PathBank:
    """Holding-time simulation of the averaged chain: exponential sojourns, embedded jump chain."""
    if dt <= 0:
        raise ModelError("observation interval must be positive")
    M = averaged.size
    q = averaged.q_bar
    rates = -np.diag(q)
    jumps = np.where(rates[:, None] > 0, q / np.where(rates > 0, rates, 1.0)[:, None], 0.0)
    np.fill_diagonal(jumps, np.where(rates > 0, 0.0, 1.0))

    endpoints = np.empty((M, path_samples), dtype=np.int64)
    integrals = np.empty((M, path_samples))
    for j in range(M):
        state = np.full(path_samples, j, dtype=np.int64)
        remaining = np.full(path_samples, dt)
        total = np.zeros(path_samples)
        active = np.ones(path_samples, dtype=bool)
        while active.any():
            idx = np.flatnonzero(active)
            r = rates[state[idx]]
            with np.errstate(divide="ignore"):
                hold = np.where(r > 0, rng.exponential(1.0, idx.size) / np.where(r > 0, r, 1.0), np.inf)
            done = hold >= remaining[idx]
            step = np.where(done, remaining[idx], hold)
            total[idx] += averaged.h_bar[state[idx]] * step
            remaining[idx] -= step
            moving = idx[~done]
            if moving.size:
                state[moving] = chain_step_many(state[moving], jumps, rng.random(moving.size))
            active[idx[done]] = False
        endpoints[j] = state
        integrals[j] = total

    tau = (np.arange(BRIDGE_NODES) + 0.5) / BRIDGE_NODES * dt
    h = averaged.h_bar
    bridge = h[:, None, None] * tau[None, None, :] + h[None, :, None] * (dt - tau)[None, None, :]
    return PathBank(
        endpoints=endpoints,
        integrals=integrals,
        transition=averaged.transition(dt),
        bridge_integrals=bridge,
        dt=dt,
    )


def _conditional_means(bank: PathBank, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    M = bank.size
    psi = np.full((M, M), np.nan)
    for j in range(M):
        counts = np.bincount(bank.endpoints[j], minlength=M)
        sums = np.bincount(bank.endpoints[j], weights=values[j], minlength=M)
        seen = counts > 0
        psi[seen, j] = sums[seen] / counts[seen]
    return psi, ~np.isnan(psi)


def _conditional_stderr(bank: PathBank, values: np.ndarray) -> np.ndarray:
    M = bank.size
    stderr = np.full((M, M), np.nan)
    for j in range(M):
        for i in range(M):
            sample = values[j, bank.endpoints[j] == i]
            if sample.size > 1:
                stderr[i, j] = sample.std(ddof=1) / np.sqrt(sample.size)
    return stderr


def _joint_matrix(bank: PathBank, kernel: PathKernel, dy: float, shift: Optional[float] = None):
    """
    joint[i, j] = P(j -> i) * E[kernel | j -> i], optionally scaled by e^-shift.
    Returns (joint, psi, present, shift).
    """
    log_values = kernel.log_kernel(dy, bank.integrals)
    log_bridge = kernel.log_kernel(dy, bank.bridge_integrals)
    if shift is None:
        shift = float(max(np.max(log_values), np.max(log_bridge)))
        if not np.isfinite(shift):
            shift = 0.0
    psi, present = _conditional_means(bank, np.exp(log_values - shift))
    bridge = np.exp(log_bridge - shift).mean(axis=2).T
    conditional = np.where(present, psi, bridge)
    return bank.transition.T * conditional, psi, present, shift


def estimate_psi(
    averaged: AveragedModel,
    y_prev: float,
    y_next: float,
    dt: float,
    path_samples: int,
    rng: np.random.Generator,
    kernel: Optional[PathKernel] = None,
) -> Tuple[PsiMatrix, np.ndarray]:
    """Monte Carlo conditional path expectations and the kernel-times-endpoint matrix."""
    if path_samples < MIN_PATH_SAMPLES:
        raise ModelError(f"psi estimation needs at least {MIN_PATH_SAMPLES} paths per start state")
    kernel = kernel or GaussianKernel(dt)
    bank = sample_path_bank(averaged, dt, path_samples, rng)
    dy = y_next - y_prev
    joint, psi, present, _ = _joint_matrix(bank, kernel, dy, shift=0.0)
    stderr = _conditional_stderr(bank, np.exp(kernel.log_kernel(dy, bank.integrals)))
    return PsiMatrix(psi=psi, present=present, stderr=stderr, path_samples=path_samples), joint


def averaged_matrix_filter_step(pi, joint: np.ndarray, step: Optional[int] = None) -> np.ndarray:
    """pi_{k+1} proportional to joint @ pi_k."""
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-10:
        raise ModelError("filter state must be a probability vector")
    new = joint @ pi
    c = new.sum()
    if not np.isfinite(c) or c <= 0:
        raise FilterDivergenceError("averaged filter mass vanished", step)
    return new / c


def dense_path_joint(
    averaged: AveragedModel,
    y_prev: float,
    y_next: float,
    dt: float,
    n_steps: int,
    path_samples: int,
    rng: np.random.Generator,
    kernel: Optional[PathKernel] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Brute-force reference for the joint matrix: Euler chain with P = I + Q_bar delta,
    left-point integral. Returns (joint, standard error).
    """
    delta = dt / n_steps
    p = np.eye(averaged.size) + averaged.q_bar * delta
    if np.any(p < 0):
        raise ModelError("dense path grid is too coarse for the intensities")
    kernel = kernel or GaussianKernel(dt)
    M = averaged.size
    joint = np.zeros((M, M))
    stderr = np.zeros((M, M))
    for j in range(M):
        state = np.full(path_samples, j, dtype=np.int64)
        integral = np.zeros(path_samples)
        for _ in range(n_steps):
            integral += averaged.h_bar[state] * delta
            state = chain_step_many(state, p, rng.random(path_samples))
        values = np.exp(kernel.log_kernel(y_next - y_prev, integral))
        for i in range(M):
            contrib = values * (state == i)
            joint[i, j] = contrib.mean()
            stderr[i, j] = contrib.std(ddof=1) / np.sqrt(path_samples)
    return joint, stderr


class AveragedMatrixFilterService:
    """
    Exact-in-the-limit averaged filter as an M x M matrix recursion.
    One path bank is sampled per run and reused for every step unless refresh_paths is set.
    """

    def __init__(
        self,
        averaged: AveragedModel,
        dt: float,
        path_samples: int = 2000,
        kernel: Optional[PathKernel] = None,
        refresh_paths: bool = False,
        show_progress: bool = False,
        name: str = "averaged-matrix",
    ):
        if path_samples < MIN_PATH_SAMPLES:
            raise ModelError(f"psi estimation needs at least {MIN_PATH_SAMPLES} paths per start state")
        self.averaged = averaged
        self.dt = dt
        self.path_samples = path_samples
        self.kernel = kernel or GaussianKernel(dt)
        self.refresh_paths = refresh_paths
        self.show_progress = show_progress
        self.name = name

    def run(self, obs: ObservationSeries, rng: RngStream, rho0=None) -> Posterior:
        gen = rng.derive(STREAM_PSI).generator()
        M = self.averaged.size
        pi = np.full(M, 1.0 / M) if rho0 is None else np.asarray(rho0, dtype=float)
        # 1) Path bank of the averaged chain
        bank = sample_path_bank(self.averaged, self.dt, self.path_samples, gen)

        # 2) Matrix recursion
        N = obs.n_obs
        probs = np.empty((N + 1, M))
        probs[0] = pi
        steps = range(N)
        if self.show_progress:
            steps = tqdm(steps, desc=f"{self.name} filter", leave=False)
        for k in steps:
            if self.refresh_paths and k > 0:
                bank = sample_path_bank(self.averaged, self.dt, self.path_samples, gen)
            joint, _, _, _ = _joint_matrix(bank, self.kernel, obs.y[k + 1] - obs.y[k])
            pi = averaged_matrix_filter_step(pi, joint, step=k + 1)
            probs[k + 1] = pi

        logger.info(f"  > {self.name} filter: {N} steps, {self.path_samples} paths per regime ({self.kernel.name} kernel)")
        return Posterior(probs=probs, obs_dt=obs.obs_dt, filter_name=self.name)
