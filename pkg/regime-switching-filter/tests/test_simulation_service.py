import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from conftest import make_params
from services.errors import ConfigError, ModelError
from services.model_service import IntensityMatrix, ObservationFunction, StateSpace, chain_transition_matrix
from services.simulation_service import (
    NoiseHooks,
    RngStream,
    SimulationService,
    chain_step,
    chain_step_many,
    generate_observations,
    iter_path_blocks,
    ou_step,
    read_observations_csv,
    read_path_csv,
    simulate_path,
    simulate_svol_returns,
    write_observations_csv,
    write_path_csv,
)
from services.svol_service import SvolParams


def test_rng_streams_are_reproducible_and_distinct():
    root = RngStream(seed=42)
    a = root.derive(0).generator().random(5)
    b = root.derive(0).generator().random(5)
    c = root.derive(1).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert root.derive(3, 4).stream_id == 4


def test_ou_step_zero_noise_is_deterministic():
    assert ou_step(0.0, 1.0, 0.5, 0.0) == pytest.approx(0.5)
    assert ou_step(2.0, 2.0, 0.3, 0.0) == pytest.approx(2.0)


def test_ou_step_rejects_bad_coefficient():
    with pytest.raises(ModelError):
        ou_step(0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ModelError):
        ou_step(0.0, 1.0, 1.5, 0.0)


def test_ou_step_moments():
    a = math.exp(-0.05)
    n = 1_000_000
    w = np.random.default_rng(5).standard_normal(n)
    x = ou_step(np.zeros(n), 1.0, a, w)
    mean, var = 1.0 - a, (1.0 - a * a) / 2.0
    assert abs(x.mean() - mean) < 4.0 * math.sqrt(var / n)
    assert abs(x.var() - var) < 4.0 * var * math.sqrt(2.0 / n)


def test_chain_step_inverse_cdf_edges():
    p = np.array([[0.0, 1.0], [0.3, 0.7]])
    assert chain_step(0, p, 0.0) == 1
    assert chain_step(1, p, 0.0) == 0
    assert chain_step(1, p, 0.2999) == 0
    assert chain_step(1, p, 0.3) == 1
    assert chain_step(0, np.eye(2), 0.999999) == 0
    with pytest.raises(ModelError):
        chain_step(2, p, 0.5)


def test_chain_step_frequencies():
    p = np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [1.0, 0.0, 0.0]])
    n = 1_000_000
    u = np.random.default_rng(9).random(n)
    draws = chain_step_many(np.zeros(n, dtype=np.int64), p, u)
    freq = np.bincount(draws, minlength=3) / n
    band = 4.0 * np.sqrt(p[0] * (1 - p[0]) / n)
    assert np.all(np.abs(freq - p[0]) < band)


def test_chain_step_many_agrees_with_scalar():
    p = chain_transition_matrix(np.array([[-10.0, 10.0], [5.0, -5.0]]), 0.05)
    rng = np.random.default_rng(2)
    current = rng.integers(0, 2, 200)
    u = rng.random(200)
    expected = [chain_step(int(c), p, float(v)) for c, v in zip(current, u)]
    assert chain_step_many(current, p, u).tolist() == expected


def test_path_shape_and_determinism(benchmark_params):
    rng = RngStream(seed=3)
    path = simulate_path(benchmark_params, rng)
    again = simulate_path(benchmark_params, rng)
    assert path.theta.size == benchmark_params.m * benchmark_params.n_obs + 1
    assert np.array_equal(path.theta, again.theta)
    assert np.array_equal(path.x, again.x)
    assert path.regimes_at_observations().size == benchmark_params.n_obs + 1


def test_blocks_reassemble_into_the_path(benchmark_params):
    rng = RngStream(seed=8)
    path = simulate_path(benchmark_params, rng)
    blocks = list(iter_path_blocks(benchmark_params, rng))
    assert np.array_equal(np.concatenate([b.theta for b in blocks]), path.theta[1:])
    assert [b.k for b in blocks] == list(range(benchmark_params.n_obs))
    assert blocks[3].start_x == path.x[3 * benchmark_params.m]


def test_frozen_chain_stays_in_its_regime():
    params = make_params(q=IntensityMatrix.constant(np.zeros((2, 2))), rho0=(0.0, 1.0))
    path = simulate_path(params, RngStream(seed=1))
    assert np.all(path.theta == 1)


def test_zero_noise_skeleton_is_monotone():
    params = make_params(epsilon=10.0, rho0=(0.0, 1.0), x0_law={"kind": "point", "params": (0.0,)})
    hooks = NoiseHooks(ou_noise=False, chain_jumps=False)
    path = simulate_path(params, RngStream(seed=1), hooks)
    assert np.all(np.diff(path.x) > 0)
    assert np.all(path.x < 10 / 3)


def test_chain_occupation_fraction():
    params = make_params(n_obs=200_000)
    path = simulate_path(params, RngStream(seed=12))
    assert np.mean(path.theta == 1) == pytest.approx(2 / 3, abs=0.02)


def test_constant_observation_function_without_noise():
    params = make_params(h=ObservationFunction.constant(2.5), n_obs=30)
    hooks = NoiseHooks(observation_noise=False)
    path = simulate_path(params, RngStream(seed=1), hooks)
    obs = generate_observations(path, params, RngStream(seed=2), hooks)
    assert obs.y[0] == params.v0
    assert np.allclose(obs.increments, 2.5 * params.delta_t, atol=1e-12)


def test_observation_noise_variance(benchmark_params):
    params = benchmark_params.replace(h=ObservationFunction.linear(0.0), n_obs=20_000)
    path = simulate_path(params, RngStream(seed=4))
    obs = generate_observations(path, params, RngStream(seed=5))
    n = params.n_obs
    assert abs(obs.increments.var() - params.delta_t) < 4.0 * params.delta_t * math.sqrt(2.0 / n)


def test_svol_returns_need_positive_h(benchmark_params):
    path = simulate_path(benchmark_params, RngStream(seed=1))
    with pytest.raises(ModelError):
        simulate_svol_returns(path, benchmark_params, SvolParams(), RngStream(seed=2))


def test_svol_returns_without_noise_follow_the_drift():
    params = make_params(
        space=StateSpace(values=(-2.0, 2.0)),
        h=ObservationFunction.constant(0.2),
        delta_t=1 / 252,
        epsilon=0.001,
        q=IntensityMatrix.two_state(2.0, 1.0),
    )
    hooks = NoiseHooks(ou_noise=False, observation_noise=False)
    path = simulate_path(params, RngStream(seed=1), hooks)
    obs = simulate_svol_returns(path, params, SvolParams(r=0.05, rho=-0.5), RngStream(seed=2), hooks)
    assert np.allclose(obs.increments, (0.05 - 0.1) * params.delta_t, atol=1e-12)


def _constant_volatility_params(epsilon, **changes):
    fields = dict(
        space=StateSpace(values=(-2.0, 2.0)),
        h=ObservationFunction.constant(0.09),
        delta_t=1 / 252,
        epsilon=epsilon,
        q=IntensityMatrix.two_state(2.0, 1.0),
        n_obs=20_000,
    )
    fields.update(changes)
    return make_params(**fields)


def test_svol_returns_total_variance():
    params = _constant_volatility_params(0.5)
    path = simulate_path(params, RngStream(seed=6))
    obs = simulate_svol_returns(path, params, SvolParams(r=0.03, rho=-0.9), RngStream(seed=7))
    target = 0.09 * params.delta_t
    assert abs(obs.increments.var() / target - 1.0) < 4.0 * math.sqrt(2.0 / params.n_obs)


def test_svol_leverage_term_scales_with_root_epsilon():
    hooks = NoiseHooks(observation_noise=False)
    svol = SvolParams(r=0.03, rho=-0.9)
    centred = {}
    for epsilon in (0.1, 0.001):
        params = _constant_volatility_params(epsilon)
        path = simulate_path(params, RngStream(seed=6), hooks)
        obs = simulate_svol_returns(path, params, svol, RngStream(seed=7), hooks)
        centred[epsilon] = obs.increments - (0.03 - 0.045) * params.delta_t
        target = epsilon * 0.81 * 0.09 * params.delta_t
        assert abs(centred[epsilon].var() / target - 1.0) < 4.0 * math.sqrt(2.0 / params.n_obs)
    assert np.allclose(centred[0.001], centred[0.1] * math.sqrt(0.01), rtol=1e-9, atol=1e-15)


def test_refining_the_grid_keeps_the_increment_law():
    increments = []
    for m, seed in ((5, 21), (10, 22)):
        params = make_params(delta_t=0.1, m=m, epsilon=0.2, n_obs=10_000)
        _, obs = SimulationService(params).run(seed=seed)
        increments.append(obs.increments)
    assert ks_2samp(*increments).pvalue > 0.01


def test_csv_dumps_round_trip(tmp_path, benchmark_params):
    service = SimulationService(benchmark_params.replace(n_obs=10))
    path, obs = service.run(seed=6)
    write_path_csv(path, tmp_path / "path.csv")
    write_observations_csv(obs, tmp_path / "obs.csv")
    assert (tmp_path / "obs.csv").read_text().splitlines()[0] == "k,t,y"
    assert len((tmp_path / "obs.csv").read_text().splitlines()) == 12
    loaded = read_observations_csv(tmp_path / "obs.csv")
    assert np.array_equal(loaded.y, obs.y)
    assert loaded.obs_dt == pytest.approx(obs.obs_dt)
    truth = read_path_csv(tmp_path / "path.csv", benchmark_params.m)
    assert np.array_equal(truth.theta, path.theta)


def test_observation_schema_mismatch(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_observations_csv(bad)
