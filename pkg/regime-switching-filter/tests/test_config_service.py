import numpy as np
import pytest

from services.errors import ConfigError
from services.config_service import load_config, parse_config_text

BASE = """\
[model]
states = -10/3, 10/3
q = -10 10; 5 -5
epsilon = 0.01
delta_t = 0.01
m = 5
n_obs = 100
h = linear 10   # comment after a value
seed = 3
"""


def test_bundled_configs_are_valid(config_dir):
    for path in sorted(config_dir.glob("*.cfg")):
        config = load_config(path)
        params = config.model_params()
        config.filter_settings()
        config.svol_params()
        if config.has_section("experiment"):
            config.experiment_config()
        assert params.n_obs > 0


def test_model_section_values():
    params = parse_config_text(BASE).model_params()
    assert params.space.values == pytest.approx((-10 / 3, 10 / 3))
    assert np.array_equal(params.q.matrix, [[-10.0, 10.0], [5.0, -5.0]])
    assert params.h.is_linear and params.h.slope == 10.0
    assert params.seed == 3
    assert parse_config_text(BASE).model_params(seed=9).seed == 9


def test_bad_value_names_key_and_location():
    text = BASE.replace("epsilon = 0.01", "epsilon = -1")
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, source="run.cfg").model_params()
    err = info.value
    assert err.key == "epsilon"
    assert err.line == 4
    assert err.column == 11
    assert "run.cfg, line 4, column 11" in str(err)


def test_unparseable_number():
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE.replace("m = 5", "m = five")).model_params()
    assert info.value.key == "m"
    assert info.value.line == 6


def test_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "gamma = 2\n")
    assert info.value.key == "gamma"
    assert info.value.line == 10
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "seed = 4\n")
    assert "duplicate" in str(info.value)


def test_unknown_and_duplicate_sections():
    with pytest.raises(ConfigError):
        parse_config_text(BASE + "[plots]\n")
    with pytest.raises(ConfigError):
        parse_config_text(BASE + "[model]\n")
    with pytest.raises(ConfigError):
        parse_config_text("epsilon = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[model\n")


def test_comment_lines_are_skipped():
    config = parse_config_text("; leading comment\n# another\n" + BASE)
    assert config.entry("model", "h").value == "linear 10"
    assert config.entry("model", "states").line == 4


def test_missing_sections_and_keys():
    with pytest.raises(ConfigError) as info:
        parse_config_text("[filter]\nparticles = 10\n").model_params()
    assert info.value.key == "model"
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE.replace("n_obs = 100\n", "")).model_params()
    assert info.value.key == "n_obs"
    with pytest.raises(ConfigError):
        parse_config_text(BASE).experiment_config()


def test_optional_model_keys():
    text = BASE + "rho0 = 0.25, 0.75\nx0 = gaussian 0 0.5\nv0 = 1.5\n"
    params = parse_config_text(text).model_params()
    assert params.rho == pytest.approx([0.25, 0.75])
    assert params.x0_law.kind == "gaussian"
    assert params.v0 == 1.5
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "x0 = cauchy 0 1\n").model_params()
    assert info.value.key == "x0"


def test_observation_function_kinds():
    for spec, kind in (("tanh 2", "bounded"), ("logistic 0.04 0.36", "bounded"), ("constant 1", "bounded")):
        params = parse_config_text(BASE.replace("linear 10", spec)).model_params()
        assert params.h.kind == kind
    with pytest.raises(ConfigError):
        parse_config_text(BASE.replace("linear 10", "cubic 1")).model_params()
    with pytest.raises(ConfigError):
        parse_config_text(BASE.replace("linear 10", "logistic 1")).model_params()


def test_filter_settings():
    text = BASE + "[filter]\nparticles = 250\nresampling = systematic\noracle_budget = 1000\nrefresh_paths = yes\n"
    settings = parse_config_text(text).filter_settings()
    assert settings.particles == 250
    assert settings.resampling == "systematic"
    assert settings.grid.budget == 1000
    assert settings.refresh_paths
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "[filter]\noracle_budget = 0\n").filter_settings()
    assert info.value.key == "oracle_budget"
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "[filter]\npsi_path_samples = 10\n").filter_settings()
    assert info.value.key == "psi_path_samples"


def test_svol_section():
    assert parse_config_text(BASE).svol_params() is None
    svol = parse_config_text(BASE + "[svol]\nr = 0.03\nrho = -0.5\n").svol_params()
    assert svol.r == 0.03 and svol.rho == -0.5
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "[svol]\nrho = 0.5\n").svol_params()
    assert info.value.key == "rho"


def test_experiment_section():
    text = BASE + "[experiment]\nsweep = dt\nvalues = 2, 4\nfilters = averaged\nfine_dt = 1e-4\n"
    experiment = parse_config_text(text).experiment_config(threads=3)
    assert experiment.sweep_variable == "m"
    assert experiment.values == (2.0, 4.0)
    assert experiment.threads == 3
    with pytest.raises(ConfigError) as info:
        parse_config_text(BASE + "[experiment]\nsweep = gamma\nvalues = 1\n").experiment_config()
    assert info.value.key == "sweep"


def test_manifest_reproduces_the_run():
    config = parse_config_text(BASE + "[filter]\nparticles = 20\n")
    manifest = config.manifest_text(seed=42, fine_dt=0.002)
    assert "# fine_dt = 0.002" in manifest
    again = parse_config_text(manifest)
    assert again.manifest_text(seed=42, fine_dt=0.002) == manifest
    params = again.model_params()
    assert params.seed == 42
    assert params.epsilon == 0.01 and params.m == 5
    assert again.filter_settings().particles == 20


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
