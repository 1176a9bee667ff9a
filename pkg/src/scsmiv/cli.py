"""Command-line front end: ``estimate``, ``test`` and ``simulate`` subcommands.

Exit codes: 0 success, 2 validation error, 3 estimation error (for example a
singular estimating-equation denominator), 4 I/O error. The environment
variable SCSMIV_THREADS caps worker parallelism.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import fields, replace

import click

from . import __version__
from .analysis import (
    AnalysisConfig,
    export_replicate,
    run_analysis,
    write_bands_csv,
    write_mc_report_json,
    write_report_json,
    write_table1_csv,
    write_testprocess_csv,
)
from .errors import (
    EXIT_ESTIMATION,
    EXIT_IO,
    EXIT_VALIDATION,
    EstimationError,
    NonConvergence,
    ScsmivError,
    ValidationError,
)
from .simulate import SimConfig, run_monte_carlo, simulate_trial

_WEIGHT_CHOICES = click.Choice(["at_risk", "at_risk_treated", "uniform"])
_VARIANCE_CHOICES = click.Choice(["full", "simplified"])
_IV_CHOICES = click.Choice(["known", "empirical", "logistic"])


def _fail(exc: BaseException) -> "click.exceptions.Exit":
    if isinstance(exc, (ValidationError,)):
        code = EXIT_VALIDATION
    elif isinstance(exc, (EstimationError, NonConvergence)):
        code = EXIT_ESTIMATION
    elif isinstance(exc, OSError):
        code = EXIT_IO
    else:
        code = EXIT_VALIDATION
    stage = getattr(exc, "stage", None)
    prefix = f"[{stage}] " if stage else ""
    click.echo(f"error: {prefix}{exc}", err=True)
    return click.exceptions.Exit(code)


def _parse_eval_times(raw: str | None) -> tuple[float, ...]:
    if not raw:
        return ()
    try:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValidationError(f"cannot parse evaluation times {raw!r}")


@click.group()
@click.version_option(version=__version__, prog_name="scsmiv")
def main():
    """Instrumental-variable estimation of cumulative treatment effects
    on survival under treatment switching."""


def _analysis_options(fn):
    opts = [
        click.option("--data", "subjects_path", required=True,
                     type=click.Path(), help="Subjects CSV (id,time,status,z[,l_*])."),
        click.option("--treatment", "treatment_path", type=click.Path(),
                     default=None, help="Long-format treatment CSV (id,change_time,value)."),
        click.option("--pz", type=float, default=None,
                     help="Known randomization probability P(Z=1)."),
        click.option("--iv-mode", type=_IV_CHOICES, default=None,
                     help="Instrument model (default: known when --pz is given, else empirical)."),
        click.option("--boot", "n_resamples", type=int, default=1000,
                     show_default=True, help="Multiplier resamples for the sup tests."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--weights", "weight_spec", type=_WEIGHT_CHOICES,
                     default="at_risk", show_default=True),
        click.option("--variance", "variance_mode", type=_VARIANCE_CHOICES,
                     default="full", show_default=True),
        click.option("--tau", type=float, default=None,
                     help="End-of-study horizon (default: largest observed time)."),
        click.option("--eval-times", type=str, default=None,
                     help="Comma-separated times to tabulate in the report."),
        click.option("--out", "output_dir", type=click.Path(), default=".",
                     show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _build_analysis_config(**kw) -> AnalysisConfig:
    return AnalysisConfig(
        subjects_path=kw["subjects_path"],
        treatment_path=kw["treatment_path"],
        pz=kw["pz"],
        iv_mode=kw["iv_mode"],
        weight_spec=kw["weight_spec"],
        n_resamples=kw["n_resamples"],
        seed=kw["seed"],
        variance_mode=kw["variance_mode"],
        tau=kw["tau"],
        eval_times=_parse_eval_times(kw["eval_times"]),
        output_dir=kw["output_dir"],
    )


def _echo_report(report, show_curve: bool) -> None:
    click.echo(f"subjects: {report.n_subjects}  events: {report.n_events}  "
               f"censored: {report.n_censored}  "
               f"switched: {report.switched_from_treated} from treated / "
               f"{report.switched_from_control} from control")
    if show_curve:
        click.echo(f"constant hazards difference: {report.beta:.6g} "
                   f"(95% CI {report.beta_ci[0]:.6g}, {report.beta_ci[1]:.6g}; "
                   f"p={report.beta_p_value:.4g})")
    if report.tests_skipped:
        click.echo("tests skipped (no resamples requested)")
    else:
        click.echo(f"causal null sup test: statistic={report.null_test.statistic:.6g} "
                   f"p={report.null_test.p_value:.4g}")
        click.echo(f"constant-effect fit sup test: statistic={report.gof_test.statistic:.6g} "
                   f"p={report.gof_test.p_value:.4g}")


@main.command()
@_analysis_options
def estimate(**kw):
    """Estimate the cumulative effect curve, its bands and both sup tests."""
    try:
        cfg = _build_analysis_config(**kw)
        report = run_analysis(cfg)
        outdir = kw["output_dir"]
        os.makedirs(outdir, exist_ok=True)
        write_report_json(report, os.path.join(outdir, "report.json"))
        write_bands_csv(report, os.path.join(outdir, "bands.csv"))
        write_testprocess_csv(report, os.path.join(outdir, "testprocess.csv"))
        _echo_report(report, show_curve=True)
    except (ScsmivError, OSError) as exc:
        raise _fail(exc)


@main.command()
@_analysis_options
def test(**kw):
    """Run only the hypothesis tests (estimation outputs suppressed)."""
    try:
        cfg = _build_analysis_config(**kw)
        if cfg.n_resamples < 1:
            raise ValidationError("the test command needs --boot >= 1")
        report = run_analysis(cfg)
        outdir = kw["output_dir"]
        os.makedirs(outdir, exist_ok=True)
        write_report_json(report, os.path.join(outdir, "report.json"))
        write_testprocess_csv(report, os.path.join(outdir, "testprocess.csv"))
        _echo_report(report, show_curve=False)
    except (ScsmivError, OSError) as exc:
        raise _fail(exc)


def _load_sim_config(config_path, overrides) -> SimConfig:
    values = {}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{config_path}: invalid JSON ({exc})")
        known = {f.name for f in fields(SimConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(
                f"{config_path}: unknown SimConfig fields {sorted(unknown)}")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("u_mean", "eval_times"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    if "u_cov" in values and isinstance(values["u_cov"], list):
        values["u_cov"] = tuple(tuple(row) for row in values["u_cov"])
    return SimConfig(**values).validate()


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON file with SimConfig fields; flags override it.")
@click.option("--n", type=int, default=None, help="Subjects per replicate.")
@click.option("--replicates", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--boot", "test_resamples", type=int, default=None,
              help="Sup-test resamples per replicate (0 = tests off).")
@click.option("--workers", type=int, default=None)
@click.option("--export-replicate", "export_index", type=int, default=None,
              help="Also dump this replicate as an analysis-ready CSV pair.")
@click.option("--out", "output_dir", type=click.Path(), default=".",
              show_default=True)
def simulate(config_path, export_index, output_dir, **overrides):
    """Run the Monte Carlo study and write table1.csv plus a JSON report."""
    try:
        cfg = _load_sim_config(config_path, overrides)
        os.makedirs(output_dir, exist_ok=True)
        report = run_monte_carlo(cfg)
        write_table1_csv(report, os.path.join(output_dir, "table1.csv"))
        write_mc_report_json(report, os.path.join(output_dir, "simulation.json"))
        if export_index is not None:
            if not 0 <= export_index < cfg.replicates:
                raise ValidationError(
                    f"--export-replicate must lie in [0, {cfg.replicates})")
            records = simulate_trial(
                replace(cfg, censor_rate=report.censor_rate_used), export_index)
            export_replicate(
                records,
                os.path.join(output_dir, f"replicate{export_index}_subjects.csv"),
                os.path.join(output_dir, f"replicate{export_index}_treatment.csv"),
            )
        for s in report.curve_stats:
            click.echo(f"{s.label}: bias={s.bias:+.4f} see={s.see:.4f} "
                       f"sd={s.sd:.4f} cp95={s.coverage:.1f}%")
        b = report.beta_stats
        click.echo(f"beta: bias={b.bias:+.4f} see={b.see:.4f} "
                   f"sd={b.sd:.4f} cp95={b.coverage:.1f}%")
        click.echo(f"switch rate {100 * report.switch_rate:.1f}%  "
                   f"censoring {100 * report.censor_share:.1f}%  "
                   f"failed replicates {report.n_failed}")
        if report.null_test_reject is not None:
            click.echo(f"test rejection at {report.test_level:g}: "
                       f"causal-null {100 * report.null_test_reject:.1f}%  "
                       f"constant-effect {100 * report.gof_test_reject:.1f}%")
    except (ScsmivError, OSError) as exc:
        raise _fail(exc)


if __name__ == "__main__":
    main()
