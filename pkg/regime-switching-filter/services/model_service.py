from __future__ import annotations
from functools import lru_cache
from typing import Callable, Literal, Optional, Tuple
import logging
import math

import numpy as np
from numpy.polynomial.hermite import hermgauss
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.linalg import expm

from services.errors import ConfigError, ModelError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
INVARIANT_VARIANCE = 0.5
TIMESCALE_WARNINGS = 64


@lru_cache(maxsize=TIMESCALE_WARNINGS)
def _warn_timescales(epsilon: float, delta_t: float, beta: float) -> None:
    """Logs once per distinct (eps, dt, beta) among the most recent TIMESCALE_WARNINGS."""
    logger.warning(
        "  > Time-scale ordering eps << dt << 1/beta not met "
        f"(eps={epsilon:g}, dt={delta_t:g}, beta={beta:g})"
    )


def _check_generator(q: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ModelError(f"intensity matrix must be square, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ModelError("intensity matrix has non-finite entries")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise ModelError("off-diagonal intensities must be nonnegative")
    scale = max(1.0, float(np.abs(q).max()))
    if np.any(np.abs(q.sum(axis=1)) > tol * scale):
        raise ModelError("every row of an intensity matrix must sum to 0")


class StateSpace(BaseModel):
    """Ordered regime levels s_1 < ... < s_M."""

    model_config = ConfigDict(frozen=True)

    values: Tuple[float, ...]

    @field_validator("values")
    @classmethod
    def _strictly_increasing(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(v) < 1:
            raise ValueError("state space needs at least one level")
        if not all(math.isfinite(s) for s in v):
            raise ValueError("state levels must be finite")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("state levels must be strictly increasing")
        return v

    @property
    def size(self) -> int:
        return len(self.values)

    @property
    def levels(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def check_index(self, i: int) -> None:
        if not 0 <= i < self.size:
            raise ModelError(f"regime index {i} out of range 0..{self.size - 1}")


class IntensityMatrix(BaseModel):
    """
    Transition intensities of the regime chain.
    - Constant mode: `entries` holds Q.
    - x-dependent mode: `function` maps an array of x values (n,) to (n, M, M);
      it is only ever evaluated pointwise on quadrature or simulation grids.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    entries: Optional[Tuple[Tuple[float, ...], ...]] = None
    function: Optional[Callable[[np.ndarray], np.ndarray]] = Field(default=None, exclude=True)
    alpha: Optional[float] = None
    beta: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "IntensityMatrix":
        if self.entries is None and self.function is None:
            raise ValueError("an intensity matrix needs entries or a function of x")
        if self.alpha is not None or self.beta is not None:
            if self.alpha is None or self.beta is None or not 0 < self.alpha <= self.beta < math.inf:
                raise ValueError("exit-rate bounds need 0 < alpha <= beta < inf")
        if self.entries is not None:
            q = np.asarray(self.entries, dtype=float)
            _check_generator(q)
            self._check_bounds(q)
        else:
            if self.alpha is None:
                raise ValueError("x-dependent intensities need explicit alpha and beta bounds")
            self.evaluate(np.zeros(1))
        return self

    def _check_bounds(self, q: np.ndarray) -> None:
        if self.alpha is None:
            return
        rates = -np.diagonal(q, axis1=-2, axis2=-1)
        slack = 1e-12 * max(1.0, self.beta)
        if np.any(rates < self.alpha - slack) or np.any(rates > self.beta + slack):
            raise ModelError(f"exit rates must lie in [{self.alpha}, {self.beta}]")

    @classmethod
    def constant(cls, q, alpha: Optional[float] = None, beta: Optional[float] = None) -> "IntensityMatrix":
        q = np.asarray(q, dtype=float)
        return cls(entries=tuple(tuple(float(v) for v in row) for row in q), alpha=alpha, beta=beta)

    @classmethod
    def two_state(cls, alpha: float, beta: float) -> "IntensityMatrix":
        return cls.constant([[-alpha, alpha], [beta, -beta]])

    @property
    def is_constant(self) -> bool:
        return self.function is None

    @property
    def matrix(self) -> np.ndarray:
        if self.entries is None:
            raise ModelError("x-dependent intensities have no single matrix")
        return np.asarray(self.entries, dtype=float)

    @property
    def dimension(self) -> int:
        if self.entries is not None:
            return len(self.entries)
        return int(np.asarray(self.function(np.zeros(1))).shape[-1])

    def evaluate(self, x) -> np.ndarray:
        """Q(x) for every x in the array, shape (n, M, M)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.function is None:
            return np.broadcast_to(self.matrix, (x.size,) + self.matrix.shape)
        q = np.asarray(self.function(x), dtype=float)
        if q.ndim != 3 or q.shape[0] != x.size or q.shape[1] != q.shape[2]:
            raise ModelError(f"intensity function returned shape {q.shape} for {x.size} points")
        if not np.all(np.isfinite(q)):
            raise ModelError("intensity function returned non-finite values")
        off = q.copy()
        idx = np.arange(q.shape[1])
        off[:, idx, idx] = 0.0
        if np.any(off < 0) or np.any(np.abs(q.sum(axis=2)) > 1e-9 * max(1.0, float(np.abs(q).max()))):
            raise ModelError("intensity function is not a valid generator at every point")
        self._check_bounds(q)
        return q

    def exit_rate_bounds(self) -> Tuple[float, float]:
        if self.alpha is not None:
            return float(self.alpha), float(self.beta)
        rates = -np.diag(self.matrix)
        return float(rates.min()), float(rates.max())

    def describe(self) -> str:
        if self.entries is None:
            return "<function of x>"
        return "; ".join(" ".join(repr(float(v)) for v in row) for row in self.entries)


class ObservationFunction(BaseModel):
    """
    The drift h of the observation process.
    - linear: h(x) = c * x
    - bounded: any continuous bounded function, with optional bounds lower <= h <= upper
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: Literal["linear", "bounded"]
    name: str = "linear"
    params: Tuple[float, ...] = (1.0,)
    function: Optional[Callable[[np.ndarray], np.ndarray]] = Field(default=None, exclude=True)
    derivative: Optional[Callable[[np.ndarray], np.ndarray]] = Field(default=None, exclude=True)
    lower: Optional[float] = None
    upper: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "ObservationFunction":
        if self.kind == "linear":
            if len(self.params) != 1 or not math.isfinite(self.params[0]):
                raise ValueError("a linear observation function needs one finite slope")
        elif self.function is None:
            raise ValueError("a bounded observation function needs a callable")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise ValueError("observation bounds need lower <= upper")
        return self

    @classmethod
    def linear(cls, slope: float) -> "ObservationFunction":
        return cls(kind="linear", name="linear", params=(float(slope),))

    @classmethod
    def tanh(cls, scale: float = 1.0) -> "ObservationFunction":
        c = float(scale)
        return cls(
            kind="bounded",
            name="tanh",
            params=(c,),
            function=lambda x: c * np.tanh(x),
            derivative=lambda x: c / np.cosh(x) ** 2,
            lower=-abs(c),
            upper=abs(c),
        )

    @classmethod
    def logistic(cls, lower: float, upper: float) -> "ObservationFunction":
        """h(x) = lower + (upper - lower) / (1 + e^-x): positive, bounded and monotone."""
        lo, hi = float(lower), float(upper)
        if not 0 < lo < hi:
            raise ModelError("logistic observation function needs 0 < lower < upper")
        span = hi - lo

        def h(x):
            return lo + span * 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))

        def dh(x):
            sig = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))
            return span * sig * (1.0 - sig)

        return cls(kind="bounded", name="logistic", params=(lo, hi), function=h, derivative=dh, lower=lo, upper=hi)

    @classmethod
    def constant(cls, value: float) -> "ObservationFunction":
        c = float(value)
        return cls(
            kind="bounded",
            name="constant",
            params=(c,),
            function=lambda x: np.full(np.shape(x), c, dtype=float),
            derivative=lambda x: np.zeros(np.shape(x), dtype=float),
            lower=c,
            upper=c,
        )

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    @property
    def slope(self) -> float:
        if not self.is_linear:
            raise ModelError(f"observation function '{self.name}' is not linear")
        return float(self.params[0])

    @property
    def is_positive(self) -> bool:
        return self.lower is not None and self.lower > 0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_linear:
            return self.params[0] * x
        return np.asarray(self.function(x), dtype=float)

    def prime(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.is_linear:
            return np.full(x.shape, self.params[0], dtype=float)
        if self.derivative is None:
            raise ModelError(f"observation function '{self.name}' has no derivative")
        return np.asarray(self.derivative(x), dtype=float)

    def describe(self) -> str:
        return " ".join([self.name] + [repr(float(p)) for p in self.params])


class InitialLaw(BaseModel):
    """Law of X(0): uniform[a, b], point mass, or gaussian(mean, std)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform", "point", "gaussian"] = "uniform"
    params: Tuple[float, ...] = (-1.0, 1.0)

    @model_validator(mode="after")
    def _check(self) -> "InitialLaw":
        expected = {"uniform": 2, "point": 1, "gaussian": 2}[self.kind]
        if len(self.params) != expected:
            raise ValueError(f"{self.kind} initial law takes {expected} parameter(s)")
        if self.kind == "uniform" and not self.params[0] < self.params[1]:
            raise ValueError("uniform initial law needs a < b")
        if self.kind == "gaussian" and not self.params[1] > 0:
            raise ValueError("gaussian initial law needs std > 0")
        return self

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.params[0], self.params[1], size)
        if self.kind == "gaussian":
            return self.params[0] + self.params[1] * rng.standard_normal(size)
        return np.full(size, self.params[0], dtype=float)

    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return float(self.params[0])

    def variance(self) -> float:
        if self.kind == "uniform":
            return (self.params[1] - self.params[0]) ** 2 / 12.0
        if self.kind == "gaussian":
            return float(self.params[1]) ** 2
        return 0.0

    def describe(self) -> str:
        return " ".join([self.kind] + [repr(float(p)) for p in self.params])


class ModelParams(BaseModel):
    """Full description of (Theta, X, Y) plus the simulation grid and seed."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: StateSpace
    q: IntensityMatrix
    epsilon: float = Field(gt=0)
    h: ObservationFunction
    delta_t: float = Field(gt=0)
    m: int = Field(gt=0)
    n_obs: int = Field(gt=0)
    # None means uniform over the state space
    rho0: Optional[Tuple[float, ...]] = None
    x0_law: InitialLaw = Field(default_factory=InitialLaw)
    v0: float = 0.0
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self) -> "ModelParams":
        M = self.space.size
        if self.q.dimension != M:
            raise ValueError(f"intensity matrix is {self.q.dimension}x{self.q.dimension} but there are {M} regimes")
        if self.rho0 is not None:
            rho = np.asarray(self.rho0, dtype=float)
            if rho.size != M:
                raise ValueError(f"rho0 has {rho.size} entries, expected {M}")
            if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-10:
                raise ValueError("rho0 must be a probability vector")
        if not self.check_timescales():
            _warn_timescales(self.epsilon, self.delta_t, self.q.exit_rate_bounds()[1])
        return self

    @property
    def fine_dt(self) -> float:
        return self.delta_t / self.m

    @property
    def ar_coefficient(self) -> float:
        return math.exp(-self.fine_dt / self.epsilon)

    @property
    def rho(self) -> np.ndarray:
        if self.rho0 is None:
            return np.full(self.space.size, 1.0 / self.space.size)
        return np.asarray(self.rho0, dtype=float)

    def check_timescales(self) -> bool:
        """eps <= dt/2 and dt <= 1/(2 beta)."""
        beta = self.q.exit_rate_bounds()[1]
        fast_ok = self.epsilon <= self.delta_t / 2.0
        slow_ok = beta <= 0 or self.delta_t <= 1.0 / (2.0 * beta)
        return fast_ok and slow_ok

    def replace(self, **changes) -> "ModelParams":
        fields = {name: getattr(self, name) for name in type(self).model_fields}
        fields.update(changes)
        return type(self)(**fields)


@lru_cache(maxsize=16)
def gauss_hermite_nodes(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes t and weights w with sum_k w_k f(s + t_k) = int f(x) mu(x) dx for mu = N(s, 1/2)."""
    if order < 1:
        raise ModelError("quadrature order must be positive")
    t, w = hermgauss(order)
    return t, w / math.sqrt(math.pi)


def invariant_density(space: StateSpace, i: int, x):
    """mu_i(x) = pi^(-1/2) exp(-(x - s_i)^2), the equilibrium of X with the regime frozen at s_i."""
    space.check_index(i)
    x = np.asarray(x, dtype=float)
    return np.exp(-((x - space.values[i]) ** 2)) / math.sqrt(math.pi)


class InvariantMeasure(BaseModel):
    model_config = ConfigDict(frozen=True)

    space: StateSpace
    quad_order: int = Field(default=64, ge=8)

    def density(self, i: int, x):
        return invariant_density(self.space, i, x)

    def nodes(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        self.space.check_index(i)
        t, w = gauss_hermite_nodes(self.quad_order)
        return self.space.values[i] + t, w

    def expect(self, f: Callable[[np.ndarray], np.ndarray], i: int) -> float:
        x, w = self.nodes(i)
        values = np.asarray(f(x), dtype=float)
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"integrand is not finite on the quadrature nodes of regime {i}")
        return float(w @ values)


def average_intensity(q: IntensityMatrix, space: StateSpace, quad_order: int = 64) -> np.ndarray:
    """Q_bar_ij = int Q_ij(x) mu_i(x) dx."""
    if quad_order < 8:
        raise ModelError("quadrature order must be at least 8")
    M = space.size
    if q.dimension != M:
        raise ModelError(f"intensity matrix does not match the {M}-state space")
    if q.is_constant:
        return q.matrix.copy()

    t, w = gauss_hermite_nodes(quad_order)
    q_bar = np.zeros((M, M))
    for i, s in enumerate(space.values):
        try:
            values = q.evaluate(s + t)
        except ModelError as e:
            raise ConfigError(f"intensity quadrature failed for regime {i}: {e}") from e
        q_bar[i] = np.tensordot(w, values[:, i, :], axes=1)

    off = np.clip(q_bar - np.diag(np.diag(q_bar)), 0.0, None)
    np.fill_diagonal(off, -off.sum(axis=1))
    return off


def average_observation(h: ObservationFunction, space: StateSpace, quad_order: int = 64) -> np.ndarray:
    """h_bar_i = int h(x) mu_i(x) dx."""
    measure = InvariantMeasure(space=space, quad_order=max(quad_order, 8))
    return np.array([measure.expect(h, i) for i in range(space.size)])


def average_leverage(h: ObservationFunction, space: StateSpace, quad_order: int = 64) -> np.ndarray:
    """(h' sqrt h)_bar_i, the averaged leverage coefficient of the volatility model."""
    measure = InvariantMeasure(space=space, quad_order=max(quad_order, 8))

    def integrand(x):
        hx = h(x)
        if np.any(hx < 0):
            raise ModelError("leverage average needs a nonnegative observation function")
        return h.prime(x) * np.sqrt(hx)

    return np.array([measure.expect(integrand, i) for i in range(space.size)])


def chain_transition_matrix(q_bar, t: float) -> np.ndarray:
    """e^{Q t}. Closed form for two states, scipy's scaling-and-squaring Pade otherwise."""
    q = np.asarray(q_bar, dtype=float)
    if t < 0:
        raise ModelError("transition time must be nonnegative")
    M = q.shape[0]
    if t == 0 or M == 1:
        return np.eye(M)
    if M == 2:
        a, b = q[0, 1], q[1, 0]
        lam = a + b
        if lam == 0:
            return np.eye(2)
        p_inf = np.array([[b, a], [b, a]]) / lam
        p = p_inf + math.exp(-lam * t) * (np.eye(2) - p_inf)
    else:
        p = expm(q * t)
    p = np.clip(p, 0.0, 1.0)
    return p / p.sum(axis=1, keepdims=True)


def chain_transition_matrices(q_stack: np.ndarray, t: float) -> np.ndarray:
    """Batched e^{Q_n t} for a stack of generators (n, M, M)."""
    q_stack = np.asarray(q_stack, dtype=float)
    if q_stack.shape[-1] == 2:
        return np.stack([chain_transition_matrix(q, t) for q in q_stack])
    p = np.clip(expm(q_stack * t), 0.0, 1.0)
    return p / p.sum(axis=-1, keepdims=True)


class AveragedModel(BaseModel):
    """Averaged coefficients (Q_bar, h_bar) that drive the limit chain and integrator."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    q_bar: np.ndarray
    h_bar: np.ndarray
    leverage: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check(self) -> "AveragedModel":
        _check_generator(np.asarray(self.q_bar, dtype=float), tol=1e-10)
        if self.h_bar.shape != (self.q_bar.shape[0],):
            raise ValueError("h_bar must have one entry per regime")
        if not np.all(np.isfinite(self.h_bar)):
            raise ValueError("h_bar must be finite")
        return self

    @property
    def size(self) -> int:
        return int(self.h_bar.size)

    def transition(self, t: float) -> np.ndarray:
        return chain_transition_matrix(self.q_bar, t)


class AveragingService:
    """
    Averages the model against the invariant measures.
    - Gauss-Hermite quadrature matched to N(s_i, 1/2), default 64 nodes.
    - The leverage average is only computed for positive observation functions.
    """

    def __init__(self, quad_order: int = 64):
        if quad_order < 8:
            raise ModelError("quadrature order must be at least 8")
        self.quad_order = quad_order

    def run(self, params: ModelParams) -> AveragedModel:
        q_bar = average_intensity(params.q, params.space, self.quad_order)
        h_bar = average_observation(params.h, params.space, self.quad_order)
        leverage = None
        if params.h.is_positive and (params.h.derivative is not None or params.h.is_linear):
            leverage = average_leverage(params.h, params.space, self.quad_order)
        logger.debug(f"  > Averaged model: h_bar={h_bar}, q_bar diag={np.diag(q_bar)}")
        return AveragedModel(q_bar=q_bar, h_bar=h_bar, leverage=leverage)
