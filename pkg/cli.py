from pathlib import Path
from typing import List, Optional
import functools
import logging
import sys

import click
import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from bridge import save_bridges as write_bridges
from cate import fit_plearner, save_cate_model
from core import load_dataset
from exceptions import ConfigError, PLearnerError
from inference import ate, best_linear_projection, format_table, write_report_csv
from models.config import (BenchmarkConfig, DatasetSchema, Direction, Estimand, FinalStage, PipelineConfig, RunConfig,
                           read_config_file)
from rate import evaluate_plearner, write_rate_json, write_toc_csv
from scores import catt_pseudo, crossfit_catt_nuisances, crossfit_nuisances, pseudo_outcomes, read_scores_csv, \
    write_scores_csv
from simulate import benchmark_mse, constant_cate as constant_cate_fn, generate, true_cate


load_dotenv()

logger = logging.getLogger(__name__)

FULL_SCALE = {"n_train": 4000, "n_test": 2000}


def _guarded(command):
    """maps configuration problems to exit code 2 and every other learner error to exit code 1"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigError, ValidationError) as e:
            click.echo(f"configuration error: {e}", err=True)
            raise click.exceptions.Exit(2)
        except PLearnerError as e:
            click.echo(f"error: {e}", err=True)
            raise click.exceptions.Exit(1)
    return wrapper


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _pipeline(config_path: Optional[str], **overrides) -> PipelineConfig:
    """PipelineConfig from an optional JSON/TOML file, with command-line flags applied on top"""
    base = read_config_file(config_path) if config_path else {}
    settings = PipelineConfig.parse_obj(base).dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "family":
            settings["cate"]["family"] = value
        elif key == "cap":
            settings["cate"]["cap"] = value
        else:
            settings[key] = value
    return PipelineConfig.parse_obj(settings)


def _schema(schema_path: str) -> DatasetSchema:
    return DatasetSchema.from_file(schema_path)


def pipeline_options(command):
    options = [
        click.option("--config", "config_path", type=click.Path(), help="pipeline settings, JSON or TOML"),
        click.option("--folds", type=int, help="cross-fitting folds"),
        click.option("--final", "family", type=click.Choice([f.value for f in FinalStage]), help="final-stage family"),
        click.option("--cap/--no-cap", default=None, help="clip CATE predictions to +-2 max|score|"),
        click.option("--q-max", type=float, help="upper clip for treatment bridge values"),
        click.option("--faithful", is_flag=True, default=None, help="no clipping of treatment bridge values"),
        click.option("--estimand", type=click.Choice([e.value for e in Estimand]), help="ate or catt"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _resolved_pipeline(config_path, folds, family, cap, q_max, faithful, estimand) -> PipelineConfig:
    return _pipeline(config_path, n_folds=folds, family=family, cap=cap, q_max=q_max, faithful=faithful,
                     estimand=estimand)


@click.group()
@click.option("--threads", type=int, default=1, envvar="PLEARNER_THREADS", show_default=True,
              help="worker cap for folds, grids, bootstrap replicates and benchmark seeds")
@click.option("--log-level", default="INFO", envvar="PLEARNER_LOG_LEVEL", show_default=True)
@click.pass_context
def cli(ctx, threads: int, log_level: str):
    """Proximal CATE estimation: simulate, fit, report and evaluate."""
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj = {"threads": threads}


@cli.command()
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--constant-cate", type=float, default=None, help="replace the true CATE by this constant")
@click.option("--out", required=True)
@click.pass_context
@_guarded
def simulate(ctx, n: int, seed: int, constant_cate: Optional[float], out: str):
    """Draw a synthetic proximal dataset with known CATE."""
    config = RunConfig(command="simulate", out=out, n=n, seed=seed, threads=ctx.obj["threads"])
    out_dir = _out_dir(out)
    cate_fn = true_cate if constant_cate is None else constant_cate_fn(constant_cate)
    draw = generate(n, seed, cate_fn)
    draw.dataset.to_frame().to_csv(out_dir / "data.csv", index=False)
    pd.DataFrame({"unit_id": np.arange(n), "tau_true": draw.tau_true, "u": draw.u}).to_csv(out_dir / "truth.csv",
                                                                                           index=False)
    with open(out_dir / "schema.json", "w") as f:
        f.write(draw.dataset.default_schema().json(indent=2))
    config.write(out_dir)
    logger.info(f"Wrote {n} simulated units to {out_dir}")


def _scores_for(data, pipeline: PipelineConfig, seed: int, threads: int):
    if pipeline.estimand == Estimand.catt:
        nuisances = crossfit_catt_nuisances(data, pipeline.n_folds, pipeline.bridge, seed, threads)
        return nuisances, catt_pseudo(data, nuisances)
    nuisances = crossfit_nuisances(data, pipeline.n_folds, pipeline.bridge, seed, threads)
    return nuisances, pseudo_outcomes(data, nuisances, pipeline.clip_threshold)


@cli.command()
@click.option("--input", "input_path", required=True)
@click.option("--schema", "schema_path", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@click.option("--save-bridges", is_flag=True, help="also write the fitted bridges to bridges.json")
@pipeline_options
@click.pass_context
@_guarded
def fit(ctx, input_path, schema_path, seed, out, save_bridges, config_path, folds, family, cap, q_max, faithful,
        estimand):
    """Cross-fit bridges, form scores and fit the CATE model."""
    pipeline = _resolved_pipeline(config_path, folds, family, cap, q_max, faithful, estimand)
    schema = _schema(schema_path)
    config = RunConfig(command="fit", out=out, input=input_path, schema_path=schema_path, dataset_schema=schema,
                       seed=seed, threads=ctx.obj["threads"], pipeline=pipeline)
    data = load_dataset(input_path, schema)
    out_dir = _out_dir(out)
    fitted = fit_plearner(data, pipeline, seed, ctx.obj["threads"])
    save_cate_model(fitted.model, out_dir / "model.json")
    write_scores_csv(fitted.scores, out_dir / "scores.csv")
    pd.DataFrame({"unit_id": np.arange(data.n), "tau_hat": fitted.predict(data.x)}).to_csv(out_dir / "tau_hat.csv",
                                                                                           index=False)
    if save_bridges:
        write_bridges(fitted.nuisances.bridges(), out_dir / "bridges.json", pipeline.n_folds, seed)
    config.write(out_dir)


@cli.command()
@click.option("--input", "input_path", required=True)
@click.option("--schema", "schema_path", required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@pipeline_options
@click.pass_context
@_guarded
def scores(ctx, input_path, schema_path, seed, out, config_path, folds, family, cap, q_max, faithful, estimand):
    """Write the cross-fitted pseudo-outcomes only."""
    pipeline = _resolved_pipeline(config_path, folds, family, cap, q_max, faithful, estimand)
    schema = _schema(schema_path)
    config = RunConfig(command="scores", out=out, input=input_path, schema_path=schema_path, dataset_schema=schema,
                       seed=seed, threads=ctx.obj["threads"], pipeline=pipeline)
    data = load_dataset(input_path, schema)
    out_dir = _out_dir(out)
    _, score_vector = _scores_for(data, pipeline, seed, ctx.obj["threads"])
    write_scores_csv(score_vector, out_dir / "scores.csv")
    config.write(out_dir)


@cli.command()
@click.option("--input", "input_path", required=True)
@click.option("--schema", "schema_path", required=True)
@click.option("--scores", "scores_path", default=None, help="scores.csv from fit or scores; cross-fits when absent")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@pipeline_options
@click.pass_context
@_guarded
def blp(ctx, input_path, schema_path, scores_path, seed, out, config_path, folds, family, cap, q_max, faithful,
        estimand):
    """Best linear projection of the CATE with HC3 errors, next to the ATE."""
    pipeline = _resolved_pipeline(config_path, folds, family, cap, q_max, faithful, estimand)
    schema = _schema(schema_path)
    config = RunConfig(command="blp", out=out, input=input_path, schema_path=schema_path, dataset_schema=schema,
                       seed=seed, threads=ctx.obj["threads"], pipeline=pipeline)
    data = load_dataset(input_path, schema)
    out_dir = _out_dir(out)
    if scores_path:
        score_vector = read_scores_csv(scores_path)
        if score_vector.n != data.n:
            raise ConfigError(f"{scores_path} has {score_vector.n} scores, {input_path} has {data.n} units")
    else:
        _, score_vector = _scores_for(data, pipeline, seed, ctx.obj["threads"])
    projection = best_linear_projection(data.x, score_vector, data.x_names)
    ate_result = ate(score_vector)
    with open(out_dir / "blp.txt", "w") as f:
        f.write(format_table(projection, ate_result))
    write_report_csv(projection, ate_result, out_dir / "blp.csv")
    config.write(out_dir)
    click.echo(format_table(projection, ate_result))


@cli.command()
@click.option("--input", "input_path", required=True)
@click.option("--schema", "schema_path", required=True)
@click.option("--direction", type=click.Choice([d.value for d in Direction]), default=Direction.benefit_desc.value,
              show_default=True)
@click.option("--boot", type=int, default=200, show_default=True)
@click.option("--split", "split_fraction", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True)
@pipeline_options
@click.pass_context
@_guarded
def rate(ctx, input_path, schema_path, direction, boot, split_fraction, seed, out, config_path, folds, family, cap,
         q_max, faithful, estimand):
    """Fit on one split, rank the other by estimated CATE and report TOC and AUTOC."""
    pipeline = _resolved_pipeline(config_path, folds, family, cap, q_max, faithful, estimand)
    schema = _schema(schema_path)
    config = RunConfig(command="rate", out=out, input=input_path, schema_path=schema_path, dataset_schema=schema,
                       seed=seed, threads=ctx.obj["threads"], boot=boot, direction=direction,
                       split_fraction=split_fraction, pipeline=pipeline)
    data = load_dataset(input_path, schema)
    out_dir = _out_dir(out)
    report = evaluate_plearner(data, config.split_fraction, pipeline, seed, config.direction, config.boot,
                               ctx.obj["threads"])
    write_rate_json(report, out_dir / "rate.json")
    write_toc_csv(report, out_dir / "toc.csv")
    config.write(out_dir)
    click.echo(f"AUTOC {report.autoc:.4f} (SE {report.autoc_se:.4f})")


@cli.command()
@click.option("--n-train", type=int, default=1000, show_default=True)
@click.option("--n-test", type=int, default=1000, show_default=True)
@click.option("--seeds", default="0,1,2,3,4,5,6,7,8,9", show_default=True, help="comma-separated seeds")
@click.option("--full-scale", is_flag=True, help=f"n_train={FULL_SCALE['n_train']}, n_test={FULL_SCALE['n_test']}")
@click.option("--certification-n", type=int, default=None, help="Monte Carlo draws for the oracle bridge check")
@click.option("--out", required=True)
@click.option("--config", "config_path", type=click.Path(), help="benchmark settings, JSON or TOML")
@click.pass_context
@_guarded
def bench(ctx, n_train, n_test, seeds, full_scale, certification_n, out, config_path):
    """MSE benchmark: estimated bridges, analytic bridges and a naive T-learner."""
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"seeds must be comma-separated integers, got {seeds!r}") from e
    if not seed_list:
        raise ConfigError("no seeds given")
    if full_scale:
        n_train, n_test = FULL_SCALE["n_train"], FULL_SCALE["n_test"]
    settings = read_config_file(config_path) if config_path else {}
    if certification_n is not None:
        settings["certification_n"] = certification_n
    benchmark = BenchmarkConfig.parse_obj(settings)
    config = RunConfig(command="bench", out=out, seeds=seed_list, n_train=n_train, n_test=n_test,
                       threads=ctx.obj["threads"], pipeline=benchmark.pipeline, benchmark=benchmark)
    out_dir = _out_dir(out)
    result = benchmark_mse(n_train, n_test, seed_list, benchmark, ctx.obj["threads"])
    result.table.to_csv(out_dir / "benchmark.csv", index=False)
    result.scatter.to_csv(out_dir / "scatter.csv", index=False)
    config.write(out_dir)
    click.echo(result.summary().to_string())


def run(argv: Optional[List[str]] = None) -> int:
    """entry point returning the process exit code"""
    try:
        result = cli.main(args=argv, prog_name="plearner", standalone_mode=False)
    except click.exceptions.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(run())
