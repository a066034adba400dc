import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.settings import Settings, setup_logging
from services.config_service import RunConfig, load_config
from services.errors import ConfigError, ModelError, RegimeFilterError
from services.experiment_service import (
    run_delta_t_sweep,
    run_epsilon_sweep,
    run_named_filter,
    write_report,
    zero_one_error,
)
from services.posterior_service import write_ess_csv, write_posterior_csv
from services.simulation_service import (
    STREAM_FILTER,
    STREAM_RETURNS,
    ObservationSeries,
    RngStream,
    SimulationService,
    read_observations_csv,
    read_path_csv,
    simulate_svol_returns,
    write_observations_csv,
    write_path_csv,
)
from services.svol_service import SvolFilterService, read_log_prices

logger = logging.getLogger("regime_filter")

CLI_FILTERS = ("optimal", "averaged", "averaged-matrix", "rb", "oracle")


def _banner(title: str) -> None:
    logger.info("=" * 90)
    logger.info(title)
    logger.info("=" * 90)


def _output_dir(args, config: RunConfig) -> Path:
    chosen = args.output_dir or Settings.OUTPUT_DIR or config.output_directory() or Settings.DEFAULT_OUTPUT_DIR
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    params = config.model_params(seed=args.seed)
    svol = config.svol_params()
    out = _output_dir(args, config)
    _banner(f"SIMULATE  N={params.n_obs}  m={params.m}  fine_dt={params.fine_dt:g}")

    path, obs = SimulationService(params).run()
    if svol is not None:
        root = RngStream(seed=params.seed)
        obs = simulate_svol_returns(path, params, svol, root.derive(STREAM_RETURNS))

    if not args.no_path:
        logger.info(f"  > Path saved to {write_path_csv(path, out / 'path.csv')}")
    logger.info(f"  > Observations saved to {write_observations_csv(obs, out / 'observations.csv')}")
    manifest = out / "manifest.cfg"
    manifest.write_text(config.manifest_text(seed=params.seed, fine_dt=params.fine_dt), encoding="utf-8")
    logger.info(f"  > Manifest saved to {manifest}")
    return 0


def _read_observations(path: str, obs_dt: float) -> ObservationSeries:
    try:
        return read_observations_csv(path, obs_dt=obs_dt)
    except ConfigError as first:
        try:
            return read_log_prices(path, obs_dt=obs_dt)
        except ConfigError:
            raise first


def cmd_filter(args) -> int:
    config = load_config(args.config)
    params = config.model_params(seed=args.seed)
    settings = config.filter_settings()
    svol = config.svol_params()
    out = _output_dir(args, config)
    obs = _read_observations(args.observations, params.delta_t)
    _banner(f"FILTER  {args.filter}  on {obs.n_obs} observations")

    rng = RngStream(seed=params.seed).derive(STREAM_FILTER)
    if svol is not None:
        if args.filter != "averaged-matrix":
            raise ConfigError(
                f"the volatility model only supports the averaged-matrix filter, not '{args.filter}'", key="filter"
            )
        service = SvolFilterService(
            params, svol, settings.psi_path_samples, settings.quad_order, settings.refresh_paths
        )
        posterior = service.run(obs, rng)
    else:
        posterior = run_named_filter(
            args.filter, params, obs, rng, settings, show_progress=Settings.SHOW_PROGRESS
        )

    name = args.filter
    logger.info(f"  > Posterior saved to {write_posterior_csv(posterior, out / f'posterior_{name}.csv')}")
    ess_path = write_ess_csv(posterior, out / f"ess_{name}.csv")
    if ess_path is not None:
        logger.info(f"  > ESS trace saved to {ess_path}")

    if args.truth:
        truth = read_path_csv(args.truth, params.m).regimes_at_observations()
        if truth.size != posterior.probs.shape[0]:
            raise ConfigError(
                f"truth has {truth.size - 1} observation times, observations have {posterior.n_steps}",
                source=args.truth,
            )
        error = zero_one_error(truth[1:], posterior.map_indices[1:])
        logger.info(f"  > 0-1 error against truth: {error:.6f}")
    return 0


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    experiment = config.experiment_config(seed=args.seed, threads=args.threads)
    wanted = {"epsilon": "epsilon", "dt": "m"}.get(args.sweep) if args.sweep else experiment.sweep_variable
    if wanted != experiment.sweep_variable:
        raise config.error(
            f"--sweep {args.sweep} does not match the configured sweep", "experiment", "sweep"
        )
    out = _output_dir(args, config)
    _banner(f"EXPERIMENT  {experiment.name}  sweep={experiment.sweep_variable}  build={experiment.build_id()}")

    if experiment.sweep_variable == "epsilon":
        report = run_epsilon_sweep(experiment, show_progress=Settings.SHOW_PROGRESS)
    else:
        report = run_delta_t_sweep(experiment, show_progress=Settings.SHOW_PROGRESS)

    for row in report.rows:
        logger.info(f"  > {row.sweep_value:<10g} {row.filter:<16} error={row.error:.4f} +/- {row.stderr:.4f}")
    for gap in report.gaps:
        logger.info(f"  > {gap.sweep_value:<10g} gap={gap.gap:+.4f} +/- {gap.stderr:.4f}")
    write_report(report, out, "csv")
    write_report(report, out, "json")
    return 0


def cmd_validate_config(args) -> int:
    config = load_config(args.config)
    params = config.model_params(seed=args.seed)
    config.filter_settings()
    config.svol_params()
    if config.has_section("experiment"):
        config.experiment_config(seed=args.seed)
    logger.info(f"  > q = {params.q.describe()}")
    logger.info(f"  > h = {params.h.describe()}, x0 = {params.x0_law.describe()}")
    if not params.check_timescales():
        logger.info("  > Configuration is valid but the time-scale ordering is not met")
    logger.info(f"  > {config.source}: OK (M={params.space.size}, fine_dt={params.fine_dt:g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regime-filter",
        description="Simulate and filter regime-switching fast mean-reverting OU models.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="run configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the [model] seed")
    common.add_argument("--threads", type=int, default=None, help="cap on parallel workers")
    common.add_argument("--output-dir", default=None, help="directory for output files")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="simulate a path and its observations")
    simulate.add_argument("--no-path", action="store_true", help="skip the fine-grid path CSV")
    simulate.set_defaults(handler=cmd_simulate)

    filt = sub.add_parser("filter", parents=[common], help="run a filter on an observation file")
    filt.add_argument("observations", help="observation CSV (k,t,y) or price CSV (timestamp,log_price)")
    filt.add_argument("--filter", choices=CLI_FILTERS, default="optimal")
    filt.add_argument("--truth", default=None, help="path CSV from simulate, for the 0-1 error")
    filt.set_defaults(handler=cmd_filter)

    experiment = sub.add_parser("experiment", parents=[common], help="run an epsilon or dt sweep")
    experiment.add_argument("--sweep", choices=("epsilon", "dt"), default=None)
    experiment.set_defaults(handler=cmd_experiment)

    validate = sub.add_parser("validate-config", parents=[common], help="check a configuration file")
    validate.set_defaults(handler=cmd_validate_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except (ConfigError, ModelError) as e:
        logger.error(f"  > Configuration error: {e}")
        return 2
    except RegimeFilterError as e:
        logger.error(f"  > Run failed: {e}")
        return 1
    except Exception as e:
        logger.error(f"  > Unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
