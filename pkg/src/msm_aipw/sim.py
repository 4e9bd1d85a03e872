"""Simulation designs with potential-outcome bookkeeping, and a Monte Carlo harness.

Two families of designs are provided.  ``main`` draws latent ``U`` and
covariates ``Z = Z(U)`` with a marginal structural Cox model for ``T(a)``
(``beta = -1``); ``supplementary`` draws a scalar ``Z`` and a conditional
model for ``T(a)`` under which proportional hazards fails marginally, so the
target is the time-averaged ``beta*`` from :mod:`msm_aipw.oracle`.

Every replicate gets its own generator built from ``(seed, replicate)``
through :class:`numpy.random.SeedSequence`, so results do not depend on the
number of worker threads.
"""
from __future__ import annotations

import gc
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DataError, NuisanceError, SolverError
from .estimator import Z975, bootstrap, fit_aipw, fit_full_data, fit_ipw, fit_naive_cox
from .nuisance import (ConstantPropensity, KnownSurvival, MarginalSurvival, NuisanceSpec,
                       default_spec)
from .oracle import beta_star, supplementary_law

log = logging.getLogger(__name__)

TAU = 1.0
MAIN_TRUTH = -1.0
FAILURE_CEILING = 0.10


class ReplicateCeilingError(RuntimeError):
    """Too many Monte Carlo replicates failed for some estimator."""


def replicate_rng(seed: int, replicate: int | None = None) -> np.random.Generator:
    if replicate is None:
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def resolve_threads(threads: int | None = None) -> int:
    """``threads``, else ``$MSM_AIPW_THREADS``, else the CPU count."""
    if threads is None:
        env = os.environ.get("MSM_AIPW_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f"MSM_AIPW_THREADS must be an integer, got {env!r}") from None
    if threads is None:
        try:
            threads = len(os.sched_getaffinity(0))
        except AttributeError:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


# ---------------------------------------------------------------------------
# Generators

@dataclass(frozen=True, eq=False)
class GeneratedSample:
    """Observed data plus the potential outcomes it was assembled from.

    ``latent`` holds ``U`` for the main designs and is empty for the
    supplementary ones, whose only covariate is drawn directly.
    """

    observed: Dataset
    t0: np.ndarray
    t1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    a: np.ndarray
    z: np.ndarray
    latent: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return np.where(self.a == 1, self.t1, self.t0)

    @property
    def c(self) -> np.ndarray:
        return np.where(self.a == 1, self.c1, self.c0)

    def rates(self) -> dict:
        """Event, loss-to-follow-up, administrative censoring and treated fractions."""
        t, c = self.t, self.c
        tau = self.observed.tau
        x = np.minimum(t, c)
        return {"event": float(np.mean((t <= c) & (t <= tau))),
                "censored_ltfu": float(np.mean((c < t) & (c <= tau))),
                "censored_admin": float(np.mean(x > tau)),
                "treated": float(np.mean(self.a))}


def _assemble(t0, t1, c0, c1, a, z, latent, tau=TAU) -> GeneratedSample:
    t = np.where(a == 1, t1, t0)
    c = np.where(a == 1, c1, c0)
    obs = Dataset(np.minimum(t, c), (t <= c).astype(int), a, z, tau)
    return GeneratedSample(obs, t0, t1, c0, c1, a, z, latent)


def main_propensity(scenario: int, z: np.ndarray) -> np.ndarray:
    if scenario in (1, 3):
        return expit(0.5 * z[:, 0] - 0.5 * z[:, 1] - 0.5 * z[:, 2])
    z2 = z[:, 1]
    return expit(np.where((z2 >= -0.5) & (z2 < 0.5), 3.0, -3.0))


def generate_main(n: int, scenario: int, seed: int, replicate: int | None = None) -> GeneratedSample:
    """Latent-variable design with ``T(a) = -log(0.5 U1 + 0.5) e^a``.

    Censoring is Cox-type (scenarios 1, 2) or uniform under control and
    Cox-type under treatment (3, 4); the propensity is logistic (1, 3) or a
    soft partition on ``Z2`` (2, 4).
    """
    if scenario not in (1, 2, 3, 4):
        raise ValueError("scenario must be 1, 2, 3 or 4")
    rng = replicate_rng(seed, replicate)
    u = rng.uniform(-1.0, 1.0, size=(n, 3))
    eps = rng.uniform(size=n)
    v = rng.uniform(size=n)
    u1, u2, u3 = u.T
    z = np.column_stack([0.5 * u1 + u3, u1 + 1.5 * u1 ** 2 - 0.5, u1 + u2])

    base = -np.log(0.5 * u1 + 0.5)
    t0, t1 = base, base * math.e
    e = -np.log(eps)
    if scenario in (1, 2):
        lp = 0.5 - z[:, 1] + 0.5 * z[:, 2]
        c0, c1 = e * np.exp(lp), e * np.exp(lp + 0.5)
    else:
        c0, c1 = 1.05 * eps, e * np.exp(3.3 + 3.5 * z[:, 2])
    # treatment reads Z only, never U
    a = (v < main_propensity(scenario, z)).astype(int)
    return _assemble(t0, t1, c0, c1, a, z, u)


def _cox_time(e: np.ndarray, alpha: float, beta_a: float, beta_z: float, a: int, z: np.ndarray):
    """Time with hazard ``exp(alpha + beta_a a + beta_z z)`` from ``e ~ Exp(1)``."""
    return e / np.exp(alpha + beta_a * a + beta_z * z)


def supp_propensity(scenario: int, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float).reshape(-1)
    if scenario in (1, 3):
        return expit(2.0 * z)
    return expit(np.where((z >= -1 / 3) & (z < 1 / 3), -2.0, 2.0))


def generate_supp(n: int, scenario: int, seed: int, replicate: int | None = None) -> GeneratedSample:
    """Scalar ``Z ~ Unif(-1, 1)`` design with non-proportional marginal hazards.

    ``T(a)``: Cox ``exp(2 - 1.12a - 2z)`` (scenarios 1, 2) or, for ``z <= 0``,
    Cox ``exp(5 - 3.4a + 2.5z)`` and ``Unif(0, 1.05)`` otherwise (3, 4).
    ``C(a)``: Cox ``exp(3.5 - 2a - 2.5z)`` (1, 3) or, for ``z <= 0``, Cox
    ``exp(3.5 - 3a - 0.5z)`` and ``Unif(0, 1.05)`` otherwise (2, 4).
    Both arms share one uniform per subject for ``T`` and one for ``C``.
    """
    if scenario not in (1, 2, 3, 4):
        raise ValueError("scenario must be 1, 2, 3 or 4")
    rng = replicate_rng(seed, replicate)
    z = rng.uniform(-1.0, 1.0, size=n)
    ut = rng.uniform(size=n)
    uc = rng.uniform(size=n)
    v = rng.uniform(size=n)
    et, ec = -np.log(ut), -np.log(uc)
    low = z <= 0

    if scenario in (1, 2):
        t0, t1 = (_cox_time(et, 2.0, -1.12, -2.0, a, z) for a in (0, 1))
    else:
        t0, t1 = (np.where(low, _cox_time(et, 5.0, -3.4, 2.5, a, z), 1.05 * ut) for a in (0, 1))
    if scenario in (1, 3):
        c0, c1 = (_cox_time(ec, 3.5, -2.0, -2.5, a, z) for a in (0, 1))
    else:
        c0, c1 = (np.where(low, _cox_time(ec, 3.5, -3.0, -0.5, a, z), 1.05 * uc) for a in (0, 1))
    a = (v < supp_propensity(scenario, z)).astype(int)
    return _assemble(t0, t1, c0, c1, a, z.reshape(-1, 1), np.zeros((n, 0)))


def supp_true_survival(scenario: int) -> Callable:
    """Conditional ``S(t; a, z)`` of ``T(a)`` in a supplementary design, as ``fn(grid, a, z)``."""

    def cox(alpha, beta_a, beta_z):
        def fn(grid, a, z):
            rate = np.exp(alpha + beta_a * np.asarray(a, float) + beta_z * z[:, 0])
            return np.exp(-rate[:, None] * np.asarray(grid, float)[None, :])
        return fn

    if scenario in (1, 2):
        return cox(2.0, -1.12, -2.0)
    if scenario in (3, 4):
        inner = cox(5.0, -3.4, 2.5)

        def mixture(grid, a, z):
            unif = np.clip(1 - np.asarray(grid, float) / 1.05, 0, 1)[None, :]
            return np.where((z[:, 0] <= 0)[:, None], inner(grid, a, z), unif)
        return mixture
    raise ValueError("scenario must be 1, 2, 3 or 4")


def generate(family: str, n: int, scenario: int, seed: int,
             replicate: int | None = None) -> GeneratedSample:
    if family == "main":
        return generate_main(n, scenario, seed, replicate)
    if family == "supplementary":
        return generate_supp(n, scenario, seed, replicate)
    raise ValueError(f"unknown family {family!r}")


def true_estimand(family: str, scenario: int) -> float:
    if family == "main":
        return MAIN_TRUTH
    return beta_star(supplementary_law(scenario), TAU).beta_star


# ---------------------------------------------------------------------------
# Estimator configurations

@dataclass(frozen=True)
class EstimatorConfig:
    """One row of a Monte Carlo report.

    ``kind`` is one of ``aipw``, ``ipw``, ``naive``, ``full``; ``nuisance`` is
    ``default`` (Cox/Cox-logit) or ``dr_check`` (true outcome survival with a
    constant propensity of 0.5 and covariate-free censoring survival, no
    survival floor).
    """

    kind: str
    folds: int = 5
    nuisance: str = "default"
    bootstrap: bool = False

    @property
    def name(self) -> str:
        if self.kind == "aipw":
            tag = f"aipw(k={self.folds})"
        else:
            tag = self.kind
        return tag if self.nuisance == "default" else f"{tag}[{self.nuisance}]"

    @property
    def models(self) -> str:
        if self.kind in ("naive", "full"):
            return ""
        if self.nuisance == "dr_check":
            return "true/marginal-const" if self.kind == "aipw" else "marginal-const"
        return "Cox/Cox-logit" if self.kind == "aipw" else "Cox-logit"


def default_estimators(family: str) -> tuple[EstimatorConfig, ...]:
    # the supplementary AIPW Cox/Cox-logit row is not cross-fitted
    k = 5 if family == "main" else 1
    return (EstimatorConfig("aipw", folds=k), EstimatorConfig("ipw"),
            EstimatorConfig("naive"), EstimatorConfig("full"))


def _nuisance_spec(cfg: EstimatorConfig, family: str, scenario: int) -> NuisanceSpec:
    if cfg.nuisance == "default":
        return default_spec()
    if cfg.nuisance == "dr_check":
        if family != "supplementary":
            raise ValueError("the dr_check nuisance needs a supplementary design (known S)")
        # flooring the injected true S would make it no longer the truth
        return NuisanceSpec(ConstantPropensity(0.5), KnownSurvival(supp_true_survival(scenario)),
                            MarginalSurvival(), clip_surv=0.0)
    raise ValueError(f"unknown nuisance configuration {cfg.nuisance!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    family: str
    scenario: int
    n: int = 1000
    replications: int = 200
    seed: int = 0
    estimators: tuple[EstimatorConfig, ...] = ()
    bootstrap_B: int = 0

    def __post_init__(self):
        if self.family not in ("main", "supplementary"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError("scenario must be 1, 2, 3 or 4")
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.bootstrap_B < 0 or self.bootstrap_B == 1:
            raise ValueError("bootstrap_B must be 0 (off) or at least 2")
        if not self.estimators:
            object.__setattr__(self, "estimators", default_estimators(self.family))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = [e.name for e in self.estimators]
        return d


@dataclass(frozen=True)
class ReplicateResult:
    estimator: str
    beta_hat: float = float("nan")
    se_model: float | None = None
    se_boot: float | None = None
    error: str | None = None


def fit_one(cfg: EstimatorConfig, sample: GeneratedSample, family: str, scenario: int,
            seed: int, bootstrap_B: int = 0) -> ReplicateResult:
    ds = sample.observed
    try:
        if cfg.kind == "aipw":
            spec = _nuisance_spec(cfg, family, scenario)

            def est(d):
                return fit_aipw(d, cfg.folds, spec, seed=seed).beta_hat
            fit = fit_aipw(ds, cfg.folds, spec, seed=seed)
            beta, se = fit.beta_hat, fit.sigma_hat
        elif cfg.kind == "ipw":
            spec = _nuisance_spec(cfg, family, scenario)

            def est(d):
                return fit_ipw(d, spec=spec).beta_hat
            beta, se = est(ds), None
        elif cfg.kind == "naive":
            def est(d):
                return fit_naive_cox(d).beta_hat
            fit = fit_naive_cox(ds)
            beta, se = fit.beta_hat, fit.se_model
        elif cfg.kind == "full":
            # with a constant hazard ratio the estimand does not depend on tau
            tau = None if family == "main" else ds.tau
            fit = fit_full_data(sample.t0, sample.t1, tau=tau)
            return ReplicateResult(cfg.name, fit.beta_hat, fit.se)
        else:
            raise ValueError(f"unknown estimator kind {cfg.kind!r}")
        se_boot = None
        if bootstrap_B and cfg.bootstrap:
            se_boot = bootstrap(ds, est, B=bootstrap_B, seed=seed, estimate=beta).se
        return ReplicateResult(cfg.name, float(beta), se, se_boot)
    except (SolverError, NuisanceError, DataError, FloatingPointError) as exc:
        log.info("replicate failed for %s: %s", cfg.name, exc)
        return ReplicateResult(cfg.name, error=f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    models: str
    bias: float
    sd: float
    mean_model_se: float | None
    mean_boot_se: float | None
    coverage_model: float | None
    coverage_boot: float | None
    failure_count: int
    replications: int


@dataclass(frozen=True)
class MonteCarloReport:
    config: dict
    truth: float
    margin_of_error: float
    summaries: tuple[EstimatorSummary, ...]
    data_rates: dict
    estimates: dict = field(repr=False, default_factory=dict)

    def summary(self, name: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self, include_estimates: bool = False) -> dict:
        d = {"config": self.config, "truth": self.truth,
             "margin_of_error": self.margin_of_error,
             "data_rates": self.data_rates,
             "estimators": [asdict(s) for s in self.summaries]}
        if include_estimates:
            d["estimates"] = self.estimates
        return d

    def to_json(self, include_estimates: bool = False) -> str:
        return json.dumps(self.to_dict(include_estimates), indent=2, sort_keys=True)

    def to_table(self) -> str:
        def f(v, w=6):
            return "-".center(w) if v is None or not np.isfinite(v) else f"{v:{w}.3f}"

        def c(v):
            return "  - " if v is None else f"{v:4.2f}"

        head = (f"{'Estimator':<22}{'Models':<20}{'Bias':>7}{'SD':>8}"
                f"{'SE Model/Boot':>16}{'Coverage Model/Boot':>22}{'Fail':>6}")
        lines = [f"{self.config['family']} scenario {self.config['scenario']}: "
                 f"n = {self.config['n']}, {self.config['replications']} replicates, "
                 f"truth = {self.truth:.4f}", head, "-" * len(head)]
        for s in self.summaries:
            lines.append(f"{s.name:<22}{s.models:<20}{f(s.bias, 7)}{f(s.sd, 8)}"
                         f"{f(s.mean_model_se, 8)}/{f(s.mean_boot_se, 6)}"
                         f"{c(s.coverage_model):>16}/{c(s.coverage_boot)}{s.failure_count:>7}")
        lines.append(f"95% coverage margin of error: +/-{self.margin_of_error:.4f}")
        rates = ", ".join(f"{k} {v:.3f}" for k, v in self.data_rates.items())
        lines.append(f"mean data rates: {rates}")
        return "\n".join(lines)


def _coverage(beta, se, truth):
    ok = [(b, s) for b, s in zip(beta, se) if s is not None and np.isfinite(b)]
    if not ok:
        return None, None
    b = np.array([x[0] for x in ok])
    s = np.array([x[1] for x in ok])
    return float(np.mean(s)), float(np.mean(np.abs(b - truth) <= Z975 * s))


def _run_replicate(config: ScenarioConfig, rep: int):
    sample = generate(config.family, config.n, config.scenario, config.seed, replicate=rep)
    fit_seed = int(np.random.SeedSequence(config.seed, spawn_key=(rep, 1)).generate_state(1)[0])
    results = []
    for cfg in config.estimators:
        results.append(fit_one(cfg, sample, config.family, config.scenario, fit_seed,
                               config.bootstrap_B))
        # scipy's root-finder wrapper forms a reference cycle that pins the score arrays
        gc.collect()
    return sample.rates(), results


def run_monte_carlo(config: ScenarioConfig, threads: int | None = None,
                    truth: float | None = None,
                    failure_ceiling: float = FAILURE_CEILING) -> MonteCarloReport:
    """Generate ``config.replications`` samples and fit every configured estimator.

    Coverage uses the normal-approximation 95% interval around the truth
    (``-1`` for the main designs, the oracle ``beta*`` otherwise).
    """
    if config.replications < 1:
        raise ValueError("replications must be at least 1")
    truth = true_estimand(config.family, config.scenario) if truth is None else float(truth)
    workers = resolve_threads(threads)
    reps = range(config.replications)
    if workers == 1:
        out = [_run_replicate(config, r) for r in reps]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda r: _run_replicate(config, r), reps))

    rates = {k: float(np.mean([o[0][k] for o in out])) for k in out[0][0]}
    summaries = []
    estimates = {}
    R = config.replications
    for j, cfg in enumerate(config.estimators):
        res = [o[1][j] for o in out]
        good = [r for r in res if r.error is None]
        failures = R - len(good)
        if failures > failure_ceiling * R:
            raise ReplicateCeilingError(
                f"{cfg.name}: {failures} of {R} replicates failed "
                f"(ceiling {failure_ceiling:.0%}); first error: "
                f"{next(r.error for r in res if r.error)}")
        beta = np.array([r.beta_hat for r in good])
        mse, cov_m = _coverage(beta, [r.se_model for r in good], truth)
        bse, cov_b = _coverage(beta, [r.se_boot for r in good], truth)
        summaries.append(EstimatorSummary(
            name=cfg.name, models=cfg.models,
            bias=float(np.mean(beta) - truth) if beta.size else float("nan"),
            sd=float(np.std(beta, ddof=1)) if beta.size > 1 else float("nan"),
            mean_model_se=mse, mean_boot_se=bse, coverage_model=cov_m, coverage_boot=cov_b,
            failure_count=failures, replications=R))
        estimates[cfg.name] = [r.beta_hat for r in res]
    return MonteCarloReport(config=config.to_dict(), truth=truth,
                            margin_of_error=1.96 * math.sqrt(0.95 * 0.05 / R),
                            summaries=tuple(summaries), data_rates=rates, estimates=estimates)
