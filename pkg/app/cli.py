"""
Command-line front end.

    bner fit     --data sample.csv
    bner predict --data sample.csv --aux aux.csv --patterns patterns.csv
    bner mse     --data sample.csv --population population.csv --B 400
    bner sim1    --n 10,25,50,100 --I 200
    bner sim2    --B-grid 50,100,200,300,400
    bner serve   --port 8000

Results go to CSV files under --out and a JSON summary is printed on stdout.
Failures print {"detail", "error_type"} on stdout and exit non-zero. Logs go
to stderr.
"""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import pandas as pd
import uvicorn
from pydantic import BaseModel, ValidationError

from app.bootstrap import bootstrap_mse
from app.config import ConfigError, RunConfig, Settings, load_settings
from app.ebp import predict_domains
from app.errors import BnerError
from app.loaders import load_aux_csv, load_population_csv, load_unit_csv
from app.models import AuxCounts, ErrorResponse, FittedModel, SampleData
from app.reml import fit_reml, parameter_table, standardized_residuals
from app.simulation import (
    N_GRID,
    Sim1Config,
    Sim2Config,
    boxplot_frame,
    metrics_frame,
    run_sim1_grid,
    run_sim2,
)
from app.targets import parse_targets
from app.transforms import get_transform
from app.utils import ensure_dir, write_csv


logger = logging.getLogger(__name__)

SIM2_DEFAULT_N = 10

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_ERROR = 2


class RunSummary(BaseModel):
    """What a successful command printed on stdout."""

    command: str
    outputs: list[str]
    converged: Optional[bool] = None
    reliable: Optional[bool] = None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    inputs = common.add_argument_group("inputs")
    inputs.add_argument("--data", help="unit-level sample CSV")
    inputs.add_argument("--aux", help="aggregated counts CSV (domain_id, pattern_id, N_dt)")
    inputs.add_argument("--patterns", help="pattern dictionary CSV (pattern_id, x1_*, x2_*)")
    inputs.add_argument("--population", help="population covariate CSV, instead of --aux/--patterns")
    inputs.add_argument("--config", help="key=value settings file")

    est = common.add_argument_group("estimation")
    est.add_argument("--transform", choices=["identity", "log"], default=None)
    est.add_argument("--targets", default=None, help="comma-separated target names")
    est.add_argument("--L", dest="L", type=int, default=None, help="Monte Carlo replicates")
    est.add_argument("--B", dest="B", type=int, default=None, help="bootstrap replicates")
    est.add_argument("--seed", type=int, default=None)
    est.add_argument("--antithetic", action="store_const", const=True, default=None)
    est.add_argument("--no-refit", dest="refit", action="store_const", const=False, default=None)
    est.add_argument("--chunk-elements", dest="chunk_elements", type=int, default=None)
    est.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    est.add_argument("--rel-tolerance", dest="rel_tolerance", type=float, default=None)

    sim = common.add_argument_group("simulation")
    sim.add_argument("--I", dest="sim_I", type=int, default=None, help="simulation iterations")
    sim.add_argument("--D", dest="sim_D", type=int, default=None, help="number of domains")
    sim.add_argument("--N", dest="sim_N_d", type=int, default=None, help="population size per domain")
    sim.add_argument("--n", dest="sim_n", default=None, help="comma-separated sample sizes per domain")
    sim.add_argument("--B-grid", dest="B_grid", default=None, help="comma-separated bootstrap sizes")

    run = common.add_argument_group("runtime")
    run.add_argument("--threads", type=int, default=None, help="worker threads (0 = all cores)")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--log-level", dest="log_level", default=None)

    parser = argparse.ArgumentParser(
        prog="bner",
        description="Empirical best prediction under the bivariate nested error regression model",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="REML fit, parameter table and residuals")
    sub.add_parser("predict", parents=[common], help="direct and EBP estimates per domain")
    sub.add_parser("mse", parents=[common], help="parametric bootstrap MSE of the EBPs")
    sub.add_parser("sim1", parents=[common], help="EBP accuracy simulation")
    sub.add_parser("sim2", parents=[common], help="bootstrap MSE accuracy simulation")
    serve = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {name: value for name, value in vars(args).items() if name in Settings.model_fields}


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=level.upper(),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        force=True,
    )


def _load_aux(config: RunConfig, sample: SampleData) -> AuxCounts:
    if config.population:
        aux = load_population_csv(config.population)
        aux.match_sample(sample)
        return aux
    return load_aux_csv(config.aux, config.patterns, sample)


def _fit(config: RunConfig, sample: SampleData) -> FittedModel:
    fitted = fit_reml(sample, config.fit)
    if not fitted.converged:
        logger.warning("[CLI] REML did not converge after %d iterations", fitted.iterations)
    return fitted


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.out, name)


def command_fit(config: RunConfig) -> RunSummary:
    transform = get_transform(config.transform)
    sample = load_unit_csv(config.data, transform)
    fitted = _fit(config, sample)
    params = pd.DataFrame([row.model_dump() for row in parameter_table(fitted)])
    units, effects = standardized_residuals(fitted, sample)
    outputs = [
        write_csv(params, _out(config, "parameters.csv")),
        write_csv(units, _out(config, "residuals.csv")),
        write_csv(effects, _out(config, "random_effects.csv")),
    ]
    return RunSummary(command="fit", outputs=outputs, converged=fitted.converged)


def command_predict(config: RunConfig) -> RunSummary:
    transform = get_transform(config.transform)
    sample = load_unit_csv(config.data, transform)
    aux = _load_aux(config, sample)
    fitted = _fit(config, sample)
    estimates = predict_domains(
        fitted, sample, aux, transform, config.mc, parse_targets(config.targets), config.threads
    )
    path = write_csv(estimates.to_frame(), _out(config, "estimates.csv"))
    return RunSummary(command="predict", outputs=[path], converged=fitted.converged)


def command_mse(config: RunConfig) -> RunSummary:
    transform = get_transform(config.transform)
    sample = load_unit_csv(config.data, transform)
    aux = _load_aux(config, sample)
    fitted = _fit(config, sample)
    targets = parse_targets(config.targets)
    report = bootstrap_mse(fitted, sample, aux, targets, transform, config.bootstrap)
    logger.info("[CLI] bootstrap used %d of %d replicates", report.B_used, report.B_requested)
    path = write_csv(report.to_frame(), _out(config, "mse.csv"))
    return RunSummary(command="mse", outputs=[path], converged=fitted.converged, reliable=report.reliable)


def _sim_fields(config: RunConfig, n_d: int) -> dict:
    return dict(
        D=config.sim_D,
        N_d=config.sim_N_d,
        n_d=n_d,
        I=config.sim_I,
        L=config.L,
        seed=config.seed,
        threads=config.threads,
        fit=config.fit,
    )


def command_sim1(config: RunConfig) -> RunSummary:
    n_values = config.sim_n or list(N_GRID)
    results = run_sim1_grid(Sim1Config(**_sim_fields(config, n_values[0])), n_values)
    path = write_csv(metrics_frame(results), _out(config, "sim1_metrics.csv"))
    return RunSummary(command="sim1", outputs=[path])


def command_sim2(config: RunConfig) -> RunSummary:
    if len(config.sim_n) > 1:
        raise ConfigError("sim2 takes a single sample size in --n")
    n_d = config.sim_n[0] if config.sim_n else SIM2_DEFAULT_N
    sim2 = run_sim2(
        Sim2Config(**_sim_fields(config, n_d), B_grid=tuple(config.B_grid), refit=config.refit)
    )
    outputs = [
        write_csv(metrics_frame(list(sim2.results.values())), _out(config, "sim2_metrics.csv")),
        write_csv(boxplot_frame(sim2), _out(config, "sim2_boxplot.csv")),
    ]
    return RunSummary(command="sim2", outputs=outputs)


HANDLERS = {
    "fit": command_fit,
    "predict": command_predict,
    "mse": command_mse,
    "sim1": command_sim1,
    "sim2": command_sim2,
}


def run(config: RunConfig) -> RunSummary:
    """Execute one command and write its output files."""
    ensure_dir(config.out)
    logger.info("[CLI] %s (seed=%d, threads=%d, out=%s)", config.command, config.seed, config.threads, config.out)
    return HANDLERS[config.command](config)


def _error(exc: Exception) -> str:
    if isinstance(exc, ValidationError):
        detail = "; ".join(
            (".".join(str(p) for p in err["loc"]) + ": " if err["loc"] else "") + err["msg"]
            for err in exc.errors()
        )
    else:
        detail = str(exc)
    return ErrorResponse(detail=detail, error_type=type(exc).__name__).model_dump_json()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging("INFO")
    try:
        settings = load_settings(args.config, _overrides(args))
        _configure_logging(settings.log_level)
        if args.command == "serve":
            uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=settings.log_level.lower())
            return EXIT_OK
        paths = {name: getattr(args, name) for name in ("data", "aux", "patterns", "population")}
        config = RunConfig.from_settings(args.command, settings, **paths)
        summary = run(config)
    except (BnerError, ValidationError) as exc:
        logger.error("[CLI] %s: %s", type(exc).__name__, exc)
        print(_error(exc))
        return EXIT_ERROR
    except Exception as exc:
        logger.exception("[CLI] unexpected failure")
        print(_error(exc))
        return EXIT_UNEXPECTED
    print(summary.model_dump_json(exclude_none=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
