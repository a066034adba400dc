from __future__ import annotations
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp

from services.errors import ConfigError, ModelError
from services.simulation_service import FLOAT_FORMAT


class Posterior(BaseModel):
    """Filtered regime probabilities at t_0..t_N; row 0 is the prior."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    probs: np.ndarray
    obs_dt: float = Field(gt=0)
    filter_name: str = ""
    means: Optional[np.ndarray] = None
    ess: Optional[np.ndarray] = None
    resampled: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check(self) -> "Posterior":
        if self.probs.ndim != 2 or self.probs.shape[0] < 1:
            raise ValueError("posterior must be a (steps, regimes) table")
        if np.any(self.probs < -1e-15) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("every posterior row must be a probability vector")
        return self

    @property
    def n_steps(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def map_indices(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def map_estimate(pi) -> int:
    """Maximum a posteriori regime; ties go to the lowest index."""
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-10:
        raise ModelError("MAP estimate needs a probability vector")
    return int(np.argmax(pi))


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum(axis=-1)


def normalize_log(log_w: np.ndarray):
    """Normalised weights and the log normaliser; all-zero weights when the mass is not finite."""
    c = float(logsumexp(log_w))
    if not np.isfinite(c):
        return np.zeros(np.shape(log_w)), c
    return np.exp(log_w - c), c


def write_posterior_csv(posterior: Posterior, target) -> Path:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    k = np.arange(posterior.probs.shape[0])
    frame = pd.DataFrame({"k": k, "t": k * posterior.obs_dt})
    for i in range(posterior.probs.shape[1]):
        frame[f"pi_{i + 1}"] = posterior.probs[:, i]
    frame["map"] = posterior.map_indices + 1
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
    return target


def read_posterior_csv(source) -> Posterior:
    try:
        frame = pd.read_csv(source)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read posterior: {e}", source=str(source)) from e
    cols = list(frame.columns)
    n_states = len(cols) - 3
    expected = ["k", "t"] + [f"pi_{i + 1}" for i in range(n_states)] + ["map"]
    if n_states < 1 or cols != expected:
        raise ConfigError(f"unexpected posterior columns {','.join(cols)}", line=1, source=str(source))
    t = frame["t"].to_numpy(dtype=float)
    obs_dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    probs = frame[expected[2:-1]].to_numpy(dtype=float)
    return Posterior(probs=probs, obs_dt=obs_dt)


def write_ess_csv(posterior: Posterior, target) -> Optional[Path]:
    if posterior.ess is None:
        return None
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    resampled = posterior.resampled if posterior.resampled is not None else np.zeros(posterior.ess.size, bool)
    frame = pd.DataFrame(
        {"k": np.arange(1, posterior.ess.size + 1), "ess": posterior.ess, "resampled": resampled.astype(int)}
    )
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
    return target
