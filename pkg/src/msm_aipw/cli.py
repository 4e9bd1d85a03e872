"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data error, 4 solver or nuisance
failure, 5 too many failed Monte Carlo replicates.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data import Dataset, load_dataset, write_dataset
from .errors import DataError, NuisanceError, SolverError
from .estimator import (bootstrap, fit_aipw, fit_aipw_nuisance, fit_full_data, fit_ipw,
                        fit_naive_cox, risk_contrasts)
from .nuisance import default_spec, identity_nuisance, identity_spec
from .oracle import LawError, beta_of_t, beta_star, law_from_descriptor, omega
from .sim import (EstimatorConfig, ReplicateCeilingError, ScenarioConfig, default_estimators,
                  generate, run_monte_carlo)

EXIT_USAGE, EXIT_DATA, EXIT_SOLVER, EXIT_CEILING = 2, 3, 4, 5


def load_schema() -> dict:
    """JSON schema covering the ``fit``, ``simulate`` and ``oracle`` outputs."""
    text = resources.files("msm_aipw").joinpath("schemas/output.schema.json").read_text("utf-8")
    return json.loads(text)


@contextlib.contextmanager
def _exit_codes():
    try:
        yield
    except (DataError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        raise click.exceptions.Exit(EXIT_DATA)
    except (SolverError, NuisanceError) as exc:
        click.echo(f"error: {exc}", err=True)
        raise click.exceptions.Exit(EXIT_SOLVER)
    except ReplicateCeilingError as exc:
        click.echo(f"error: {exc}", err=True)
        raise click.exceptions.Exit(EXIT_CEILING)
    except LawError as exc:
        raise click.UsageError(str(exc))


def _emit(payload: dict, output: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)
    if output:
        Path(output).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _float_list(value: str | None, name: str) -> list[float] | None:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}",
                                 param_hint=name) from None


def _clip_ps(value: str | None) -> tuple[float, float] | None:
    vals = _float_list(value, "--clip-ps")
    if vals is None:
        return None
    if len(vals) != 2 or not 0 <= vals[0] < vals[1] <= 1:
        raise click.BadParameter("expected LO,HI with 0 <= LO < HI <= 1", param_hint="--clip-ps")
    return vals[0], vals[1]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="msm-aipw")
@click.option("-v", "--verbose", count=True, help="Log progress to stderr (-vv for debug).")
def cli(verbose: int) -> None:
    """Causal log hazard ratio estimation under the marginal structural Cox model."""
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# fit

@cli.command()
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--estimator", type=click.Choice(["aipw", "ipw", "naive", "full"]), default="aipw",
              show_default=True,
              help="Estimator. 'full' reads a potential-outcome CSV with columns t0,t1.")
@click.option("--tau", type=float, required=True,
              help="Maximum follow-up time; later times are censored at tau.")
@click.option("--folds", type=click.IntRange(min=1), default=None,
              help="Cross-fitting folds for aipw (default 5; 1 disables cross-fitting).")
@click.option("--clip-ps", "clip_ps", default=None, metavar="LO,HI",
              help="Propensity clipping interval [default: 0.1,0.9].")
@click.option("--clip-surv", type=click.FloatRange(0, 1, max_open=True), default=None,
              metavar="FLOOR", help="Floor for fitted survival curves [default: 0.05].")
@click.option("--identity-weights", is_flag=True,
              help="Use constant propensity 0.5 and unit survival curves (ipw, aipw).")
@click.option("--bootstrap", "boot", type=click.IntRange(min=0), default=0, show_default=True,
              metavar="B", help="Bootstrap replicates (0 = off).")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for fold assignment and bootstrap.")
@click.option("--risk-times", default=None, metavar="T1,T2,...",
              help="Times at which to report risks, risk difference and ratio.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker threads (fits run single-threaded; accepted for symmetry).")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None,
              help="Write JSON here instead of stdout.")
def fit(data, estimator, tau, folds, clip_ps, clip_surv, identity_weights, boot, seed,
        risk_times, threads, output):
    """Fit an estimator to a CSV file with columns time,event,treatment,z1..zp."""
    clip = _clip_ps(clip_ps)
    if boot == 1:
        raise click.BadParameter("use 0 (off) or at least 2 replicates", param_hint="--bootstrap")
    times = _float_list(risk_times, "--risk-times")
    if not tau > 0:
        raise click.BadParameter("tau must be positive", param_hint="--tau")
    if folds is not None and estimator != "aipw":
        raise click.UsageError("--folds applies to --estimator aipw only")
    if identity_weights and estimator not in ("aipw", "ipw"):
        raise click.UsageError("--identity-weights applies to aipw and ipw only")
    if identity_weights and (clip is not None or clip_surv is not None):
        raise click.UsageError("--identity-weights cannot be combined with clipping flags")
    if estimator in ("naive", "full") and (clip is not None or clip_surv is not None):
        raise click.UsageError(f"clipping flags do not apply to --estimator {estimator}")
    if estimator == "full" and boot:
        raise click.UsageError("--bootstrap does not apply to --estimator full")
    if times is not None and any(t < 0 or t > tau for t in times):
        raise click.BadParameter("risk times must lie in [0, tau]", param_hint="--risk-times")

    with _exit_codes():
        if estimator == "full":
            t0, t1 = _load_potential(data)
            result = fit_full_data(t0, t1, tau=tau)
            payload = result.to_dict()
        else:
            ds = load_dataset(data, tau)
            spec = identity_spec(0.5) if identity_weights else default_spec(
                clip or (0.1, 0.9), 0.05 if clip_surv is None else clip_surv)
            k = 5 if folds is None else folds
            if estimator == "aipw":
                def est(d):
                    return fit_aipw(d, k, spec, seed=seed)
            elif estimator == "ipw":
                def est(d):
                    if identity_weights:
                        return fit_ipw(d, nuisance=identity_nuisance(0.5))
                    return fit_ipw(d, spec=spec)
            else:
                est = fit_naive_cox
            result = est(ds)
            payload = result.to_dict()
            if boot:
                b = bootstrap(ds, lambda d: est(d).beta_hat, B=boot, seed=seed,
                              estimate=result.beta_hat)
                payload["se_boot"] = b.se
                payload["ci_boot"] = list(b.ci)
                payload.setdefault("diagnostics", {})["bootstrap"] = {
                    "replicates": boot, "failures": b.failures,
                    "skipped_single_arm": b.skipped_single_arm}
                if estimator == "ipw":
                    payload["ci"] = list(b.ci)
        payload["tau"] = tau
        if times is not None:
            payload["risk_contrasts"] = [r.to_dict() for r in
                                         risk_contrasts(result.beta_hat, result.lambda_hat, times, tau)]
        _emit(payload, output)


def _load_potential(path):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        for col in ("t0", "t1"):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing column '{col}'")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty file")
    try:
        t0 = np.array([float(r["t0"]) for r in rows])
        t1 = np.array([float(r["t1"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from None
    if np.any(t0 < 0) or np.any(t1 < 0):
        raise DataError(f"{path}: negative follow-up time")
    return t0, t1


# ---------------------------------------------------------------------------
# simulate

_SIM_ESTIMATORS = ("aipw", "ipw", "naive", "full", "aipw-dr", "ipw-dr")


@cli.command()
@click.option("--family", type=click.Choice(["main", "supplementary"]), default="main",
              show_default=True, help="Design family.")
@click.option("--scenario", type=click.IntRange(1, 4), default=1, show_default=True,
              help="Scenario number within the family.")
@click.option("--n", "n", type=click.IntRange(min=50), default=1000, show_default=True,
              help="Sample size per replicate.")
@click.option("--reps", type=click.IntRange(min=1), default=200, show_default=True,
              help="Number of Monte Carlo replicates.")
@click.option("--seed", type=int, default=0, show_default=True, help="Master seed.")
@click.option("--folds", type=click.IntRange(min=1), default=None,
              help="AIPW folds (default 5 for main, 1 for supplementary).")
@click.option("--estimators", default="aipw,ipw,naive,full", show_default=True,
              help=f"Comma-separated subset of {', '.join(_SIM_ESTIMATORS)}. The '-dr' rows use "
                   "the true outcome survival with a constant propensity and covariate-free "
                   "censoring model (supplementary family only).")
@click.option("--bootstrap", "boot", type=click.IntRange(min=0), default=0, show_default=True,
              metavar="B", help="Bootstrap replicates per dataset for aipw/ipw/naive (0 = off).")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker threads [default: $MSM_AIPW_THREADS, else all cores].")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON report here; the text table goes next to it as .txt.")
@click.option("--include-estimates", is_flag=True, help="Add per-replicate estimates to the JSON.")
def simulate(family, scenario, n, reps, seed, folds, estimators, boot, threads, output,
             include_estimates):
    """Run a Monte Carlo study and report bias, SD, SE and coverage."""
    if boot == 1:
        raise click.BadParameter("use 0 (off) or at least 2 replicates", param_hint="--bootstrap")
    names = [e.strip() for e in estimators.split(",") if e.strip()]
    bad = [e for e in names if e not in _SIM_ESTIMATORS]
    if bad or not names:
        raise click.BadParameter(f"unknown estimator(s) {bad}", param_hint="--estimators")
    if any(e.endswith("-dr") for e in names) and family != "supplementary":
        raise click.UsageError("the '-dr' estimators need --family supplementary")
    k = folds or default_estimators(family)[0].folds
    cfgs = []
    for e in names:
        kind, _, tag = e.partition("-")
        cfgs.append(EstimatorConfig(kind, folds=k if kind == "aipw" else 5,
                                    nuisance="dr_check" if tag == "dr" else "default",
                                    bootstrap=kind in ("aipw", "ipw", "naive")))
    config = ScenarioConfig(family, scenario, n=n, replications=reps, seed=seed,
                            estimators=tuple(cfgs), bootstrap_B=boot)
    with _exit_codes():
        report = run_monte_carlo(config, threads=threads)
    table = report.to_table()
    if output:
        Path(output).write_text(report.to_json(include_estimates) + "\n", encoding="utf-8")
        Path(output).with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
        click.echo(table)
    else:
        click.echo(report.to_json(include_estimates))
        click.echo(table, err=True)


# ---------------------------------------------------------------------------
# oracle

@cli.command()
@click.option("--law", required=True,
              help="Law descriptor: a JSON object, or a path to a file holding one.")
@click.option("--tau", type=float, required=True, help="Upper end of the time window.")
@click.option("--points", type=click.IntRange(min=2), default=101, show_default=True,
              help="Number of times at which curves are reported.")
@click.option("--panels", type=click.IntRange(min=10), default=20_000, show_default=True,
              help="Quadrature panels on [0, tau].")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Also write t, beta(t), Lambda*(t), omega(t) as plot-ready CSV.")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None,
              help="Write JSON here instead of stdout.")
def oracle(law, tau, points, panels, csv_path, output):
    """Compute beta* and Lambda* of an analytic potential-outcome law."""
    if not tau > 0:
        raise click.BadParameter("tau must be positive", param_hint="--tau")
    text = law
    if not law.lstrip().startswith("{"):
        try:
            text = Path(law).read_text(encoding="utf-8")
        except OSError as exc:
            raise click.BadParameter(f"cannot read law file: {exc}", param_hint="--law") from None
    try:
        desc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise click.BadParameter(f"malformed JSON: {exc}", param_hint="--law") from None

    with _exit_codes():
        model = law_from_descriptor(desc)
        sol = beta_star(model, tau, panels)
        ts = np.linspace(tau / points, tau, points)
        rows = []
        for t in ts:
            try:
                b = beta_of_t(model, t)
            except ValueError:
                b = None
            lam = sol.lambda_star(t)
            w = float(omega(model, t, sol.beta_star)) if b is not None else None
            rows.append((float(t), b, float(lam), w))
    payload = {"law": desc, "tau": tau, "beta_star": sol.beta_star, "h_residual": sol.h_residual,
               "beta_of_t": [[t, b] for t, b, _, _ in rows],
               "lambda_star": [[t, lam] for t, _, lam, _ in rows],
               "omega": [[t, w] for t, _, _, w in rows]}
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta_t", "lambda_star", "omega"])
            for t, b, lam, om in rows:
                w.writerow([repr(t), "" if b is None else repr(b), repr(lam),
                            "" if om is None else repr(om)])
    _emit(payload, output)


# ---------------------------------------------------------------------------
# generate

@cli.command("generate")
@click.option("--family", type=click.Choice(["main", "supplementary"]), default="main",
              show_default=True, help="Design family.")
@click.option("--scenario", type=click.IntRange(1, 4), default=1, show_default=True,
              help="Scenario number within the family.")
@click.option("--n", "n", type=click.IntRange(min=1), default=1000, show_default=True,
              help="Sample size.")
@click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True,
              help="Observed-data CSV (time,event,treatment,z1..zp).")
@click.option("--potential", type=click.Path(dir_okay=False), default=None,
              help="Also write potential outcomes (t0,t1,c0,c1,treatment,z...) here.")
def generate_cmd(family, scenario, n, seed, output, potential):
    """Draw one simulated dataset and write it as CSV."""
    with _exit_codes():
        sample = generate(family, n, scenario, seed)
        write_dataset(sample.observed, output)
        if potential:
            with open(potential, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                p = sample.z.shape[1]
                w.writerow(["t0", "t1", "c0", "c1", "treatment"] + [f"z{j + 1}" for j in range(p)])
                for i in range(n):
                    w.writerow([repr(float(sample.t0[i])), repr(float(sample.t1[i])),
                                repr(float(sample.c0[i])), repr(float(sample.c1[i])),
                                int(sample.a[i]), *(repr(float(v)) for v in sample.z[i])])


def main(argv=None) -> int:
    try:
        # non-standalone click returns the code of a raised Exit instead of exiting
        rv = cli.main(args=argv, prog_name="msm-aipw", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE if isinstance(exc, click.UsageError) else 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
