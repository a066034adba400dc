from __future__ import annotations
from typing import Optional, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm
from tqdm import tqdm

from services.errors import BudgetExceededError, FilterDivergenceError
from services.model_service import ModelParams, chain_transition_matrices, chain_transition_matrix
from services.posterior_service import Posterior
from services.simulation_service import ObservationSeries

logger = logging.getLogger(__name__)


class GridConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_cells: int = Field(default=200, ge=2)
    v_cells: int = Field(default=256, ge=2)
    x_padding: float = Field(default=4.0, gt=0)
    budget: int = Field(default=200_000_000, gt=0)


class GridOracle(BaseModel):
    """
    Discretised joint law of (Theta, X, V) where V is the within-interval observation integral.
    - kernels[r, src, dst]: exact OU transition between x cells with the regime at s_r
    - shifts: per-destination-cell shift of V, in v cells
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    x_centers: np.ndarray
    v_centers: np.ndarray
    kernels: np.ndarray
    chain: np.ndarray
    shifts: np.ndarray
    zero_index: float
    initial: np.ndarray

    @property
    def n_states(self) -> int:
        return self.kernels.shape[0]


def _x_range(params: ModelParams, padding: float) -> Tuple[float, float]:
    levels = params.space.levels
    lo, hi = levels.min() - padding, levels.max() + padding
    law = params.x0_law
    if law.kind == "uniform":
        lo, hi = min(lo, law.params[0]), max(hi, law.params[1])
    elif law.kind == "point":
        lo, hi = min(lo, law.params[0] - padding), max(hi, law.params[0] + padding)
    else:
        spread = 4.0 * law.params[1]
        lo, hi = min(lo, law.params[0] - spread), max(hi, law.params[0] + spread)
    return float(lo), float(hi)


def _initial_mass(params: ModelParams, edges: np.ndarray, centers: np.ndarray) -> np.ndarray:
    law = params.x0_law
    if law.kind == "uniform":
        a, b = law.params
        mass = np.clip(np.minimum(b, edges[1:]) - np.maximum(a, edges[:-1]), 0.0, None)
    elif law.kind == "gaussian":
        cdf = norm.cdf(edges, loc=law.params[0], scale=law.params[1])
        cdf[0], cdf[-1] = 0.0, 1.0
        mass = np.diff(cdf)
    else:
        mass = np.zeros(centers.size)
        pos = np.interp(law.params[0], centers, np.arange(centers.size))
        lo = int(math.floor(pos))
        frac = pos - lo
        mass[lo] += 1.0 - frac
        if frac > 0:
            mass[lo + 1] += frac
    return mass / mass.sum()


def build_grid_oracle(params: ModelParams, config: Optional[GridConfig] = None) -> GridOracle:
    config = config or GridConfig()
    M = params.space.size
    cost = M * config.x_cells * config.v_cells * params.m * params.n_obs
    if cost > config.budget:
        raise BudgetExceededError(
            f"grid oracle needs {cost:.3g} cell updates, above the budget of {config.budget:.3g}",
            key="oracle_budget",
        )

    lo, hi = _x_range(params, config.x_padding)
    edges = np.linspace(lo, hi, config.x_cells + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    a = params.ar_coefficient
    sd = math.sqrt((1.0 - a * a) / 2.0)

    inner = edges[1:-1]
    kernels = np.empty((M, centers.size, centers.size))
    for r, s in enumerate(params.space.values):
        mu = a * centers + (1.0 - a) * s
        cdf = norm.cdf((inner[None, :] - mu[:, None]) / sd)
        cdf = np.hstack([np.zeros((centers.size, 1)), cdf, np.ones((centers.size, 1))])
        k = np.diff(cdf, axis=1)
        kernels[r] = k / k.sum(axis=1, keepdims=True)

    if params.q.is_constant:
        chain = chain_transition_matrix(params.q.matrix, params.fine_dt)
    else:
        chain = chain_transition_matrices(params.q.evaluate(centers), params.fine_dt)

    h = params.h(centers)
    v_lo = min(0.0, params.delta_t * float(h.min()))
    v_hi = max(0.0, params.delta_t * float(h.max()))
    if v_hi - v_lo <= 0:
        v_lo, v_hi = -1.0, 1.0
    v_centers = np.linspace(v_lo, v_hi, config.v_cells)
    dv = v_centers[1] - v_centers[0]

    initial = params.rho[:, None] * _initial_mass(params, edges, centers)[None, :]
    return GridOracle(
        x_centers=centers,
        v_centers=v_centers,
        kernels=kernels,
        chain=chain,
        shifts=params.fine_dt * h / dv,
        zero_index=-v_lo / dv,
        initial=initial,
    )


def _shift_cells(row: np.ndarray, n: int) -> np.ndarray:
    """Move mass n cells along the last axis; mass past either end piles up in the edge cell."""
    V = row.shape[-1]
    if n == 0:
        return row.copy()
    out = np.zeros_like(row)
    if n > 0:
        n = min(n, V - 1)
        out[..., n:] = row[..., : V - n]
        out[..., V - 1] += row[..., V - n :].sum(axis=-1)
    else:
        n = min(-n, V - 1)
        out[..., : V - n] = row[..., n:]
        out[..., 0] += row[..., :n].sum(axis=-1)
    return out


def _place_at(weights: np.ndarray, position: float, V: int) -> np.ndarray:
    """(M, X) weights spread onto V cells at a fractional index, linear interpolation."""
    table = np.zeros(weights.shape + (V,))
    lo = int(math.floor(position))
    frac = position - lo
    lo = min(max(lo, 0), V - 1)
    table[..., lo] += (1.0 - frac) * weights
    table[..., min(lo + 1, V - 1)] += frac * weights
    return table


class GridOracleService:
    """Deterministic grid filter used as the reference posterior on small instances."""

    def __init__(self, params: ModelParams, config: Optional[GridConfig] = None, show_progress: bool = False):
        self.params = params
        self.config = config or GridConfig()
        self.show_progress = show_progress
        self.oracle = build_grid_oracle(params, self.config)

    def _substep(self, table: np.ndarray) -> np.ndarray:
        oracle = self.oracle
        if oracle.chain.ndim == 2:
            table = np.einsum("rs,rxv->sxv", oracle.chain, table)
        else:
            table = np.einsum("xrs,rxv->sxv", oracle.chain, table)
        table = np.matmul(oracle.kernels.transpose(0, 2, 1), table)
        shifted = np.empty_like(table)
        for x, s in enumerate(oracle.shifts):
            n = int(math.floor(s))
            f = s - n
            shifted[:, x, :] = (1.0 - f) * _shift_cells(table[:, x, :], n) + f * _shift_cells(table[:, x, :], n + 1)
        return shifted

    def run(self, obs: ObservationSeries) -> Posterior:
        oracle = self.oracle
        params = self.params
        V = oracle.v_centers.size
        marginal = oracle.initial
        N = obs.n_obs

        probs = np.empty((N + 1, oracle.n_states))
        means = np.empty(N + 1)
        probs[0] = marginal.sum(axis=1)
        means[0] = float(marginal.sum(axis=0) @ oracle.x_centers)

        steps = range(N)
        if self.show_progress:
            steps = tqdm(steps, desc="grid oracle", leave=False)
        for k in steps:
            table = _place_at(marginal, oracle.zero_index, V)
            for _ in range(params.m):
                table = self._substep(table)
            dy = obs.y[k + 1] - obs.y[k]
            log_lik = -((dy - oracle.v_centers) ** 2) / (2.0 * params.delta_t)
            marginal = (table * np.exp(log_lik - log_lik.max())).sum(axis=2)
            c = marginal.sum()
            if not np.isfinite(c) or c <= 0:
                raise FilterDivergenceError("grid oracle mass vanished", k + 1)
            marginal = marginal / c
            probs[k + 1] = marginal.sum(axis=1)
            means[k + 1] = float(marginal.sum(axis=0) @ oracle.x_centers)

        logger.info(f"  > grid oracle: {N} steps on {oracle.x_centers.size} x {V} cells")
        return Posterior(probs=probs / probs.sum(axis=1, keepdims=True), obs_dt=obs.obs_dt, filter_name="oracle", means=means)


def grid_oracle_filter(obs: ObservationSeries, params: ModelParams, config: Optional[GridConfig] = None) -> Posterior:
    return GridOracleService(params, config).run(obs)
