#!/usr/bin/env python
import logging
import os
import sys
import typing as t
from dataclasses import replace

import click
import numpy as np

from checks import run_checks
from harness import ExperimentResult, run_experiment
from lib import ConfigError, InputError, NumericalError, setup_logging
from metrics import AccuracyMatrix, compute_metrics, mean_report, write_curve, write_metrics
from protocol import ProtocolConfig, dump_config, generate_stream, load_config, load_stream

logger = logging.getLogger(__name__)


def fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def make_config(config_file: t.Optional[str], **overrides) -> ProtocolConfig:
    overrides = {key: value for key, value in overrides.items() if value is not None}
    try:
        if config_file:
            return load_config(config_file, **overrides)
        return ProtocolConfig(**overrides)
    except ConfigError as err:
        fail(1, f"config error: {err}")


def mean_matrix(matrices: t.Sequence[AccuracyMatrix]) -> AccuracyMatrix:
    return AccuracyMatrix(
        [np.mean([m.a[k, : k + 1] for m in matrices], axis=0).tolist() for k in range(matrices[0].K)]
    )


def echo_metrics(values: t.Dict[str, float]):
    for name, value in values.items():
        click.echo(f"{name:>18}: {value:.4f}")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose: bool):
    """
    Exemplar-free class-incremental learning on multimodal graph streams.
    """
    setup_logging(verbose)


@main.command()
@click.option("-c", "--config", "config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-s", "--seed", type=int)
@click.option("-o", "--outdir", default="stream", show_default=True)
def generate(config_file: t.Optional[str], seed: t.Optional[int], outdir: str):
    """
    Write the synthetic stream: one graph file per phase split plus the config.
    """
    config = make_config(config_file, seed=seed)
    stream = generate_stream(config)
    stream.save(outdir)
    click.echo(f"{config.num_phases} phases written to {outdir}")


@main.command()
@click.option("-c", "--config", "config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--stream", "stream_dir", type=click.Path(exists=True, file_okay=False),
              help="use a stream written by `generate` instead of sampling one")
@click.option("-s", "--seed", type=int)
@click.option("-n", "--seeds", default=1, show_default=True, help="number of consecutive seeds to average")
@click.option("--gamma", type=float)
@click.option("--beta", type=float)
@click.option("--lambda2", type=float)
@click.option("--compensation/--no-compensation", default=None)
@click.option("-o", "--outdir", default="results", show_default=True)
def run(
    config_file: t.Optional[str],
    stream_dir: t.Optional[str],
    seed: t.Optional[int],
    seeds: int,
    gamma: t.Optional[float],
    beta: t.Optional[float],
    lambda2: t.Optional[float],
    compensation: t.Optional[bool],
    outdir: str,
):
    """
    Run MCIGLE, the naive baseline and the joint upper bound; write metrics.csv,
    accuracy_matrix.csv, naive_accuracy_matrix.csv and curve.csv.
    """
    if seeds < 1:
        fail(1, "config error: --seeds must be at least 1")
    overrides = dict(seed=seed, gamma=gamma, beta=beta, lambda2=lambda2, compensation=compensation)
    overrides = {key: value for key, value in overrides.items() if value is not None}
    stream = None
    if stream_dir:
        try:
            stream = load_stream(stream_dir)
            config = replace(stream.config, **overrides)
        except (ConfigError, InputError) as err:
            fail(1, f"config error: {err}")
    else:
        config = make_config(config_file, **overrides)

    results: t.List[ExperimentResult] = []
    try:
        with click.progressbar(range(seeds), label="Running seeds") as bar:
            for offset in bar:
                seeded = replace(config, seed=config.seed + offset)
                results.append(run_experiment(seeded, stream))
    except NumericalError as err:
        fail(2, f"numerical failure: {err}")

    os.makedirs(outdir, exist_ok=True)
    report = mean_report([r.mcigle.report for r in results])
    naive = mean_report([r.naive.report for r in results])
    extra = {f"naive_{key}": value for key, value in naive.scalars().items()}
    extra["joint_acc"] = float(np.mean([r.joint_acc for r in results]))
    write_metrics(os.path.join(outdir, "metrics.csv"), report, extra)
    mean_matrix([r.mcigle.accuracy for r in results]).save(os.path.join(outdir, "accuracy_matrix.csv"))
    mean_matrix([r.naive.accuracy for r in results]).save(
        os.path.join(outdir, "naive_accuracy_matrix.csv")
    )
    write_curve(os.path.join(outdir, "curve.csv"), report)
    with open(os.path.join(outdir, "config.cfg"), "w") as f:
        f.write(dump_config(config))
    logger.info("results for %d seed(s) written to %s", seeds, outdir)
    echo_metrics({**report.scalars(), **extra})


@main.command(name="eval")
@click.argument("matrix_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", help="write metrics.csv here")
def evaluate(matrix_file: str, output: t.Optional[str]):
    """
    Recompute the metrics from a saved accuracy_matrix.csv.
    """
    try:
        report = compute_metrics(AccuracyMatrix.load(matrix_file))
    except InputError as err:
        fail(1, f"input error: {err}")
    if output:
        write_metrics(output, report)
    echo_metrics(report.scalars())


@main.command()
@click.option("-s", "--seed", default=0, show_default=True)
def check(seed: int):
    """
    Run the oracle and invariant suite; exit status 2 if anything fails.
    """
    results = run_checks(seed)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        click.echo(f"[{status:>4}] {result.name}: {result.detail}")
    if not all(result.passed for result in results):
        fail(2, f"{sum(not r.passed for r in results)} check(s) failed")


if __name__ == "__main__":
    main()
