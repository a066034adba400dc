import numpy as np
import pytest

from services.errors import ConfigError, ModelError
from services.posterior_service import (
    Posterior,
    map_estimate,
    normalize_log,
    read_posterior_csv,
    total_variation,
    write_ess_csv,
    write_posterior_csv,
)


def _posterior(**changes):
    fields = dict(probs=np.array([[0.5, 0.5], [0.9, 0.1], [0.3, 0.7]]), obs_dt=0.01, filter_name="rb")
    fields.update(changes)
    return Posterior(**fields)


def test_rows_must_be_probability_vectors():
    with pytest.raises(ValueError):
        _posterior(probs=np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        _posterior(probs=np.array([0.5, 0.5]))
    assert _posterior().n_steps == 2
    assert _posterior().map_indices.tolist() == [0, 0, 1]


def test_map_estimate_rejects_non_probabilities():
    with pytest.raises(ModelError):
        map_estimate([0.7, 0.7])


def test_total_variation_per_row():
    tv = total_variation([[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [0.5, 0.5]])
    assert tv.tolist() == [1.0, 0.0]


def test_normalize_log_handles_tiny_weights():
    w, c = normalize_log(np.array([-1000.0, -1000.0, -np.inf]))
    assert w == pytest.approx([0.5, 0.5, 0.0])
    assert c == pytest.approx(-1000.0 + np.log(2.0))


def test_posterior_csv_round_trip(tmp_path):
    posterior = _posterior()
    target = write_posterior_csv(posterior, tmp_path / "posterior_rb.csv")
    lines = target.read_text().splitlines()
    assert lines[0] == "k,t,pi_1,pi_2,map"
    assert lines[2].endswith(",1")
    assert lines[3].endswith(",2")
    loaded = read_posterior_csv(target)
    assert np.array_equal(loaded.probs, posterior.probs)
    assert loaded.obs_dt == pytest.approx(0.01)


def test_posterior_csv_schema(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("k,t,p1,map\n0,0,1,1\n")
    with pytest.raises(ConfigError):
        read_posterior_csv(bad)


def test_ess_trace(tmp_path):
    assert write_ess_csv(_posterior(), tmp_path / "ess.csv") is None
    posterior = _posterior(ess=np.array([80.0, 40.0]), resampled=np.array([False, True]))
    lines = write_ess_csv(posterior, tmp_path / "ess.csv").read_text().splitlines()
    assert lines == ["k,ess,resampled", "1,80,0", "2,40,1"]


def test_normalize_log_without_mass():
    w, c = normalize_log(np.full(3, -np.inf))
    assert c == -np.inf
    assert w.tolist() == [0.0, 0.0, 0.0]
