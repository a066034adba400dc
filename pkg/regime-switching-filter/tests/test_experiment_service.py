import json
import math

import numpy as np
import pytest

from conftest import make_params
from services.config_service import load_config
from services.errors import ConfigError, ModelError
from services.experiment_service import (
    REPORT_COLUMNS,
    ErrorReport,
    ExperimentConfig,
    FilterSettings,
    ReportRow,
    read_report_csv,
    report_path,
    run_delta_t_sweep,
    run_epsilon_sweep,
    run_named_filter,
    write_report,
    zero_one_error,
)
from services.model_service import IntensityMatrix
from services.posterior_service import total_variation
from services.simulation_service import RngStream, SimulationService


def _experiment(**changes) -> ExperimentConfig:
    fields = dict(
        base=make_params(epsilon=0.02, delta_t=0.05, m=2, n_obs=20, seed=7),
        name="unit",
        sweep_variable="epsilon",
        values=(0.02,),
        filters=("optimal", "averaged"),
        seeds=(0, 1),
        filter_settings=FilterSettings(particles=50),
        threads=1,
    )
    fields.update(changes)
    return ExperimentConfig(**fields)


def test_zero_one_error_examples():
    assert zero_one_error([0, 1, 1], [0, 0, 1]) == pytest.approx(1 / 3)
    assert zero_one_error([1, 1], [1, 1]) == 0.0
    assert zero_one_error([], []) == 0.0
    with pytest.raises(ModelError):
        zero_one_error([0, 1], [0])


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        _experiment(values=())
    with pytest.raises(ValueError):
        _experiment(values=(-0.1,))
    with pytest.raises(ValueError):
        _experiment(sweep_variable="m", values=(2.5,))
    with pytest.raises(ValueError):
        _experiment(filters=("kalman",))


def test_particle_schedule_and_cell_params():
    config = _experiment(sweep_variable="m", values=(8,), particle_schedule="log2m", fine_dt=1e-4)
    assert config.particles_for(8) == 60
    assert config.particles_for(1) == 1
    params = config.cell_params(8)
    assert params.m == 8
    assert params.delta_t == pytest.approx(8e-4)
    assert params.fine_dt == pytest.approx(1e-4)
    assert _experiment().particles_for(8) == 50


def test_build_id_is_stable():
    a, b = _experiment(echo="x = 1"), _experiment(echo="x = 1")
    assert a.build_id() == b.build_id()
    assert len(a.build_id()) == 12
    assert a.build_id() != _experiment(echo="x = 2").build_id()


def test_unknown_filter_name(small_params):
    _, obs = SimulationService(small_params).run(seed=1)
    with pytest.raises(ConfigError):
        run_named_filter("kalman", small_params, obs, RngStream(seed=1))


def test_optimal_dispatches_to_rao_blackwell(small_params):
    _, obs = SimulationService(small_params).run(seed=1)
    posterior = run_named_filter("optimal", small_params, obs, RngStream(seed=2), FilterSettings(particles=30))
    assert posterior.means is not None


def test_single_value_sweep():
    report = run_epsilon_sweep(_experiment())
    assert [r.filter for r in report.rows] == ["optimal", "averaged"]
    assert all(r.seed_count == 2 and r.runtime_s == 0.0 for r in report.rows)
    assert len(report.gaps) == 1
    assert report.gaps[0].gap == pytest.approx(report.rows[1].error - report.rows[0].error)


def test_absorbing_regime_is_never_missed():
    base = make_params(
        epsilon=0.02,
        delta_t=0.05,
        m=2,
        n_obs=20,
        seed=7,
        q=IntensityMatrix.constant([[-10.0, 10.0], [0.0, 0.0]]),
        rho0=(0.0, 1.0),
    )
    report = run_epsilon_sweep(_experiment(base=base, seeds=(0, 1, 2)))
    assert np.all(report.errors("optimal") == 0.0)
    assert np.all(report.errors("averaged") == 0.0)


def test_sweep_kind_is_checked():
    with pytest.raises(ConfigError):
        run_delta_t_sweep(_experiment())
    with pytest.raises(ConfigError):
        run_epsilon_sweep(_experiment(sweep_variable="m", values=(2,)))


def test_delta_t_sweep_reports_best_m():
    config = _experiment(sweep_variable="m", values=(2, 4), filters=("averaged",), fine_dt=0.01)
    report = run_delta_t_sweep(config)
    assert report.argmin in (2.0, 4.0)
    assert report.argmin == report.argmin_value("averaged")
    assert report.sweep_values("averaged").tolist() == [2.0, 4.0]


def test_thread_count_does_not_change_results():
    one = run_epsilon_sweep(_experiment(values=(0.02, 0.01), threads=1))
    two = run_epsilon_sweep(_experiment(values=(0.02, 0.01), threads=2))
    assert one.rows == two.rows
    assert one.gaps == two.gaps


def test_report_files(tmp_path):
    report = ErrorReport(
        experiment="unit",
        sweep_variable="epsilon",
        rows=[ReportRow(sweep_value=0.1, filter="optimal", error=0.25, stderr=0.01, runtime_s=0.0, seed_count=4)],
        build_id="abc",
    )
    csv_path = write_report(report, tmp_path, "csv")
    assert csv_path.name == "unit_epsilon.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 2
    assert read_report_csv(csv_path) == report.rows

    data = json.loads(write_report(report, tmp_path, "json").read_text())
    assert list(data) == sorted(data)
    assert data["build_id"] == "abc"


def test_empty_report_is_header_only(tmp_path):
    report = ErrorReport(experiment="empty", sweep_variable="m")
    target = write_report(report, tmp_path, "csv")
    assert target == report_path(report, tmp_path, "csv")
    assert target.name == "empty_dt.csv"
    assert target.read_text().splitlines() == [",".join(REPORT_COLUMNS)]
    assert read_report_csv(target) == []


def test_report_schema_mismatch(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_report_csv(bad)


def _nonincreasing_within(values, stderrs, sigmas=2.0) -> bool:
    return all(
        later <= earlier + sigmas * math.hypot(se_earlier, se_later)
        for earlier, later, se_earlier, se_later in zip(values, values[1:], stderrs, stderrs[1:])
    )


@pytest.mark.slow
def test_averaging_gap_closes_as_epsilon_shrinks(config_dir):
    config = load_config(config_dir / "benchmark_epsilon.cfg").experiment_config()
    assert config.values == (0.1, 0.05, 0.01, 0.005, 0.001)
    report = run_epsilon_sweep(config)
    gaps = np.array([g.gap for g in report.gaps])
    gap_stderrs = np.array([g.stderr for g in report.gaps])
    assert _nonincreasing_within(gaps, gap_stderrs)
    assert np.all(gaps >= -2.0 * gap_stderrs)
    assert report.gaps[-1].sweep_value == 0.001
    assert gaps[-1] < 0.02
    assert _nonincreasing_within(report.errors("optimal"), report.stderrs("optimal"))


@pytest.mark.slow
def test_averaged_posterior_approaches_the_optimal_one():
    base = make_params(n_obs=2000, seed=2024)
    settings = FilterSettings(particles=500)
    means, stderrs = [], []
    for epsilon in (0.1, 0.03, 0.01, 0.003, 0.001):
        params = base.replace(epsilon=epsilon)
        tv = []
        for seed in range(10):
            _, obs = SimulationService(params).run(seed=seed)
            optimal = run_named_filter("optimal", params, obs, RngStream(seed=seed).derive(1), settings)
            averaged = run_named_filter("averaged", params, obs, RngStream(seed=seed).derive(2), settings)
            tv.append(total_variation(optimal.probs, averaged.probs).mean())
        tv = np.array(tv)
        means.append(tv.mean())
        stderrs.append(tv.std(ddof=1) / math.sqrt(tv.size))
    assert _nonincreasing_within(means, stderrs)


@pytest.mark.slow
def test_observation_interval_sweep_has_an_interior_minimum(config_dir):
    config = load_config(config_dir / "benchmark_dt.cfg").experiment_config()
    report = run_delta_t_sweep(config)
    assert 5e-4 <= report.argmin * config.fine_dt <= 8e-3
    assert report.argmin not in (min(config.values), max(config.values))
