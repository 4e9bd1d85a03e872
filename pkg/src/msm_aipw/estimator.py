"""Estimators of the causal log hazard ratio under the marginal structural Cox model.

``fit_aipw`` is the cross-fitted, jointly augmented estimator: nuisances are
fitted out of fold, ``Lambda`` is profiled out fold by fold, and the averaged
fold equation ``U_cf(beta) = 0`` is solved with Brent's method.
``fit_ipw``, ``fit_naive_cox`` and ``fit_full_data`` are the comparison
estimators.
"""
from __future__ import annotations

import gc
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .data import Dataset, FoldAssignment, assign_folds
from .errors import (DataError, DegenerateInformationError, NuisanceError,
                     SolverError)
from .nuisance import NuisanceSpec, NuisanceTriple, cox_partial_likelihood, default_spec
from .scores import (EPS_DEN, ScoreBatch, StepFunction, TimeGrid, aggregate_from_means,
                     build_time_grid, compute_dataset_scores)

log = logging.getLogger(__name__)

Z975 = float(norm.ppf(0.975))
BRACKET = 20.0
MAX_BRACKET = 50.0
BETA_XTOL = 1e-12


def _ci(beta: float, se: float | None) -> tuple[float, float] | None:
    if se is None or not np.isfinite(se):
        return None
    return (beta - Z975 * se, beta + Z975 * se)


# ---------------------------------------------------------------------------
# Root finding

def solve_beta(u: Callable[[float], float], bracket: float = BRACKET,
               max_bracket: float = MAX_BRACKET, xtol: float = BETA_XTOL,
               maxiter: int = 200,
               admissible: Callable[[float], bool] | None = None,
               scan_step: float = 0.1) -> float:
    """Root of a scalar estimating function by Brent's method.

    The symmetric bracket ``[-bracket, bracket]`` grows by a factor 1.5 up to
    ``max_bracket`` until ``u`` changes sign.

    With ``admissible`` given, the bracket is first scanned in steps of
    ``scan_step``; every sign change is refined by Brent and only roots with
    ``admissible(root)`` true are kept (the one nearest 0 is returned).  This
    discards sign changes caused by poles of the estimating function.
    """
    if admissible is not None:
        return _solve_scanned(u, admissible, bracket, max_bracket, xtol, maxiter, scan_step)
    width = bracket
    while True:
        lo, hi = u(-width), u(width)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise SolverError("estimating function is not finite on the bracket")
        if lo == 0:
            return -width
        if hi == 0:
            return width
        if np.sign(lo) != np.sign(hi):
            break
        if width >= max_bracket:
            raise SolverError(f"estimating equation has no root in range "
                              f"[-{max_bracket:g}, {max_bracket:g}]")
        width = min(width * 1.5, max_bracket)
    try:
        return float(brentq(u, -width, width, xtol=xtol, maxiter=maxiter))
    except RuntimeError as exc:
        raise SolverError(f"Brent iteration failed: {exc}") from exc


def _solve_scanned(u, admissible, bracket, max_bracket, xtol, maxiter, step):
    width = bracket
    while True:
        grid = np.linspace(-width, width, int(round(2 * width / step)) + 1)
        vals = np.array([u(b) for b in grid])
        ok = np.isfinite(vals)
        roots = [float(b) for b, v in zip(grid, vals) if v == 0 and admissible(float(b))]
        for i in np.flatnonzero(ok[:-1] & ok[1:] & (np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)):
            try:
                r = float(brentq(u, grid[i], grid[i + 1], xtol=xtol, maxiter=maxiter))
            except RuntimeError:
                continue
            if admissible(r):
                roots.append(r)
        if roots:
            return min(roots, key=abs)
        if width >= max_bracket:
            raise SolverError(f"estimating equation has no root in range "
                              f"[-{max_bracket:g}, {max_bracket:g}] where the aggregated "
                              f"risk term stays positive")
        width = min(width * 1.5, max_bracket)


# ---------------------------------------------------------------------------
# AIPW

@dataclass(frozen=True, eq=False)
class FoldInternals:
    """In-fold scores of fold ``m`` computed under its out-of-fold nuisances."""

    m: int
    index: np.ndarray
    nuisance: NuisanceTriple
    scores: ScoreBatch
    eps_den: float = EPS_DEN

    def __post_init__(self):
        sc = self.scores
        object.__setattr__(self, "p0bar", sc.P0.mean(axis=0))
        object.__setattr__(self, "qbar", sc.Q.mean(axis=0))
        object.__setattr__(self, "dn0bar", sc.dN0.mean(axis=0))
        object.__setattr__(self, "dn1total", float(sc.dN1.sum(axis=1).mean()))

    @property
    def size(self) -> int:
        return self.index.size

    def aggregate(self, beta: float):
        return aggregate_from_means(self.p0bar, self.qbar, beta, self.eps_den)

    def u(self, beta: float) -> float:
        return self.dn1total - float(self.aggregate(beta).abar @ self.dn0bar)

    def du(self, beta: float) -> float:
        return -float(self.aggregate(beta).v @ self.dn0bar)

    def admissible(self, beta: float) -> bool:
        """``S0(t; beta)`` exceeds the guard wherever the fold has ``dN0`` mass."""
        s0 = self.aggregate(beta).s0
        return bool(np.all(s0[self.dn0bar != 0] > self.eps_den))

    def lambda_increments(self, beta: float) -> np.ndarray:
        s0 = self.aggregate(beta).s0
        return self.dn0bar / np.where(s0 <= self.eps_den, self.eps_den, s0)


def u_function(folds: Sequence[FoldInternals], beta: float) -> float:
    """Cross-fitted estimating function ``U_cf(beta)``, the average of fold equations."""
    return float(np.mean([f.u(beta) for f in folds]))


def u_derivative(folds: Sequence[FoldInternals], beta: float) -> float:
    return float(np.mean([f.du(beta) for f in folds]))


def lambda_tilde(fold: FoldInternals, beta: float) -> StepFunction:
    return StepFunction(fold.scores.grid.times, np.cumsum(fold.lambda_increments(beta)))


def variance_hat(folds: Sequence[FoldInternals], beta: float) -> float:
    """Sandwich-type variance ``sigma^2`` of ``sqrt(n)(beta_hat - beta*)``."""
    n = sum(f.size for f in folds)
    num = 0.0
    den = 0.0
    for f in folds:
        agg = f.aggregate(beta)
        dlam = f.lambda_increments(beta)
        sc = f.scores
        eb = np.exp(beta)
        step = max(1, 1_000_000 // dlam.size)
        for i in range(0, f.size, step):
            rows = slice(i, i + step)
            q = sc.Q[rows] * (eb * dlam)
            d1 = sc.dN0[rows] - sc.P0[rows] * dlam - q
            d2 = (sc.dN1[rows] - q).sum(axis=1)
            psi = d2 - d1 @ agg.abar
            num += float(psi @ psi)
        den += f.size * float(agg.v @ f.dn0bar)
    if den == 0 or not np.isfinite(den):
        raise DegenerateInformationError("degenerate information: variance denominator is zero")
    return n * num / den ** 2


@dataclass(frozen=True, eq=False)
class AipwFit:
    beta_hat: float
    lambda_hat: StepFunction
    sigma_hat: float
    ci: tuple[float, float] | None
    u_residual: float
    n: int
    k: int
    folds: tuple[FoldInternals, ...] = field(repr=False, default=())
    fold_diagnostics: list = field(default_factory=list)
    se_boot: float | None = None
    ci_boot: tuple[float, float] | None = None

    @property
    def se_model(self) -> float:
        return self.sigma_hat

    def to_dict(self) -> dict:
        return {"estimator": "aipw", "beta_hat": self.beta_hat, "se_model": self.sigma_hat,
                "se_boot": self.se_boot, "ci": list(self.ci) if self.ci else None,
                "ci_boot": list(self.ci_boot) if self.ci_boot else None,
                "u_residual": self.u_residual, "n": self.n, "folds": self.k,
                "lambda_hat": self.lambda_hat.pairs(),
                "diagnostics": {"folds": self.fold_diagnostics}}


def _check_fold_arms(dataset: Dataset, folds: FoldAssignment) -> None:
    for m in range(1, folds.k + 1):
        train = folds.complement(m) if folds.k > 1 else np.arange(dataset.n)
        arms = np.unique(dataset.a[train])
        if arms.size < 2:
            raise DataError(f"fold {m}: out-of-fold sample contains a single treatment arm")


def fold_internals(dataset: Dataset, folds: FoldAssignment,
                   nuisances: Sequence[NuisanceTriple]) -> tuple[FoldInternals, ...]:
    """In-fold scores for every fold on the union grid of all fold nuisances."""
    grid = build_time_grid(dataset, list(nuisances))
    return tuple(FoldInternals(m, folds.members(m), nu,
                               compute_dataset_scores(dataset, nu, grid, folds.members(m)))
                 for m, nu in enumerate(nuisances, start=1))


def fit_aipw_folds(dataset: Dataset, folds: FoldAssignment,
                   nuisances: Sequence[NuisanceTriple]) -> AipwFit:
    """AIPW given fold ``m``'s out-of-fold nuisances ``nuisances[m - 1]``."""
    internals = fold_internals(dataset, folds, nuisances)
    grid = internals[0].scores.grid
    diags = []

    beta = solve_beta(lambda b: u_function(internals, b),
                      admissible=lambda b: all(f.admissible(b) for f in internals))
    lam = np.mean([np.cumsum(f.lambda_increments(beta)) for f in internals], axis=0)
    sigma2 = variance_hat(internals, beta)
    se = float(np.sqrt(sigma2 / dataset.n))
    for f in internals:
        diags.append({"fold": f.m, "size": f.size, "nuisance_converged": f.nuisance.converged(),
                      "denominator_guard": f.aggregate(beta).guard_count})
    return AipwFit(beta_hat=beta, lambda_hat=StepFunction(grid.times, lam), sigma_hat=se,
                   ci=_ci(beta, se), u_residual=abs(u_function(internals, beta)),
                   n=dataset.n, k=folds.k, folds=internals, fold_diagnostics=diags)


def fit_aipw(dataset: Dataset, k: int = 5, spec: NuisanceSpec | None = None,
             seed: int = 0) -> AipwFit:
    """Cross-fitted AIPW estimator; ``k = 1`` fits nuisances on the full sample."""
    spec = spec or default_spec()
    folds = assign_folds(dataset.n, k, seed)
    _check_fold_arms(dataset, folds)
    nuisances = []
    for m in range(1, k + 1):
        train = dataset if k == 1 else dataset.subset(folds.complement(m))
        try:
            nuisances.append(spec.fit(train))
        except NuisanceError as exc:
            raise type(exc)(f"fold {m}: {exc}") from exc
    return fit_aipw_folds(dataset, folds, nuisances)


def fit_aipw_nuisance(dataset: Dataset, nuisance: NuisanceTriple) -> AipwFit:
    """AIPW without cross-fitting under an already fitted (or known) nuisance triple."""
    folds = FoldAssignment(np.ones(dataset.n, dtype=np.int64), 1)
    return fit_aipw_folds(dataset, folds, [nuisance])


# ---------------------------------------------------------------------------
# IPW

@dataclass(frozen=True, eq=False)
class IpwFit:
    beta_hat: float
    lambda_hat: StepFunction
    u_residual: float
    n: int
    se_boot: float | None = None
    ci_boot: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {"estimator": "ipw", "beta_hat": self.beta_hat, "se_model": None,
                "se_boot": self.se_boot, "ci": list(self.ci_boot) if self.ci_boot else None,
                "u_residual": self.u_residual, "n": self.n,
                "lambda_hat": self.lambda_hat.pairs(), "diagnostics": {}}


def ipw_weights(dataset: Dataset, nuisance: NuisanceTriple, times: np.ndarray) -> np.ndarray:
    """Subject-time weights ``1 / {pi~(A, Z) S_c(t; A, Z)}``, shape ``(n, len(times))``."""
    pi = nuisance.pi_hat(dataset.z)
    a = dataset.a
    pt = np.where(a == 1, pi, 1 - pi)
    sc = np.where((a == 1)[:, None], nuisance.sc_hat(times, 1, dataset.z),
                  nuisance.sc_hat(times, 0, dataset.z))
    return 1.0 / (pt[:, None] * sc)


def weighted_cox_terms(dataset: Dataset, weights: np.ndarray, times: np.ndarray):
    """Risk-set sums for the treatment-only weighted partial likelihood."""
    x = dataset.x[:, None]
    y = (x >= times[None, :]) * weights
    dn = ((x == times[None, :]) & (dataset.delta[:, None] == 1)) * weights
    a = dataset.a.astype(float)
    return {"r1": a @ y, "r0": (1 - a) @ y, "d": dn.sum(axis=0), "d1": a @ dn}


def _weighted_u(terms, beta):
    eb = np.exp(beta)
    abar = eb * terms["r1"] / (terms["r0"] + eb * terms["r1"])
    return float(np.sum(terms["d1"] - terms["d"] * abar))


def _weighted_breslow(terms, beta) -> np.ndarray:
    return terms["d"] / (terms["r0"] + np.exp(beta) * terms["r1"])


def fit_ipw(dataset: Dataset, nuisance: NuisanceTriple | None = None,
            spec: NuisanceSpec | None = None) -> IpwFit:
    """Weighted partial likelihood with IPT and IPC weights fitted on the full sample."""
    if nuisance is None:
        nuisance = (spec or default_spec()).fit(dataset)
    times = np.unique(dataset.x[dataset.delta == 1])
    if times.size == 0:
        raise SolverError("no events")
    terms = weighted_cox_terms(dataset, ipw_weights(dataset, nuisance, times), times)
    n = dataset.n
    beta = solve_beta(lambda b: _weighted_u(terms, b) / n)
    lam = np.cumsum(_weighted_breslow(terms, beta))
    return IpwFit(beta_hat=beta, lambda_hat=StepFunction(times, lam),
                  u_residual=abs(_weighted_u(terms, beta) / n), n=n)


# ---------------------------------------------------------------------------
# Naive and full-data Cox

@dataclass(frozen=True, eq=False)
class CoxFit:
    estimator: str
    beta_hat: float
    se_model: float
    lambda_hat: StepFunction
    n: int
    se_robust: float | None = None
    se_boot: float | None = None
    ci_boot: tuple[float, float] | None = None

    @property
    def se(self) -> float:
        return self.se_robust if self.se_robust is not None else self.se_model

    @property
    def ci(self):
        return _ci(self.beta_hat, self.se)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "beta_hat": self.beta_hat, "se_model": self.se,
                "se_boot": self.se_boot, "ci": list(self.ci) if self.ci else None,
                "ci_boot": list(self.ci_boot) if self.ci_boot else None, "n": self.n,
                "lambda_hat": self.lambda_hat.pairs(),
                "diagnostics": {"se_naive_information": self.se_model}}


def fit_naive_cox(dataset: Dataset) -> CoxFit:
    """Unweighted partial likelihood on treatment alone, Breslow baseline."""
    fit = cox_partial_likelihood(dataset.x, dataset.delta, dataset.a.reshape(-1, 1),
                                 what="naive Cox model")
    se = float(1.0 / np.sqrt(fit.information[0, 0]))
    return CoxFit("naive", float(fit.theta[0]), se,
                  StepFunction(fit.event_times, np.cumsum(fit.baseline_jumps)), dataset.n)


def fit_full_data(t0, t1, tau: float | None = None) -> CoxFit:
    """Cox fit on both potential outcomes stacked per subject, cluster-robust SE.

    With ``tau`` given, potential times beyond ``tau`` are censored at ``tau``.
    """
    t0 = np.asarray(t0, float)
    t1 = np.asarray(t1, float)
    n = t0.size
    time = np.concatenate([t0, t1])
    event = np.ones(2 * n)
    if tau is not None:
        event = (time <= tau).astype(float)
        time = np.minimum(time, tau)
    a = np.concatenate([np.zeros(n), np.ones(n)])
    fit = cox_partial_likelihood(time, event, a.reshape(-1, 1), what="full-data Cox model")
    beta = float(fit.theta[0])
    info = float(fit.information[0, 0])

    # score residuals, summed within subject
    eb = np.exp(beta)
    sorted_arms = (np.sort(time[:n]), np.sort(time[n:]))
    y0, y1 = (n - np.searchsorted(s, fit.event_times, side="left") for s in sorted_arms)
    abar = eb * y1 / (y0 + eb * y1)
    dlam = fit.baseline_jumps
    idx = np.searchsorted(fit.event_times, time, side="right")
    c0 = np.concatenate([[0.0], np.cumsum(dlam)])[idx]
    c1 = np.concatenate([[0.0], np.cumsum(abar * dlam)])[idx]
    ev_idx = np.clip(np.searchsorted(fit.event_times, time), 0, fit.event_times.size - 1)
    resid = event * (a - abar[ev_idx]) - np.exp(beta * a) * (a * c0 - c1)
    cluster = resid[:n] + resid[n:]
    se_robust = float(np.sqrt(np.sum(cluster ** 2)) / info)
    return CoxFit("full", beta, float(1 / np.sqrt(info)),
                  StepFunction(fit.event_times, np.cumsum(dlam)), n, se_robust=se_robust)


# ---------------------------------------------------------------------------
# Bootstrap and risk contrasts

@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci: tuple[float, float]
    estimates: np.ndarray
    failures: int
    skipped_single_arm: int


def bootstrap(dataset: Dataset, estimator: Callable[[Dataset], float], B: int = 100,
              seed: int = 0, estimate: float | None = None,
              max_failure_rate: float = 0.2) -> BootstrapResult:
    """Nonparametric bootstrap over subjects; every replicate refits the full pipeline.

    Replicates that draw a single arm or whose fit fails are dropped and counted;
    more than ``max_failure_rate * B`` such replicates is an error.
    """
    if B < 2:
        raise ValueError("bootstrap needs at least 2 replicates")
    if estimate is None:
        estimate = estimator(dataset)
    values = []
    skipped = failed = 0
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        idx = rng.integers(0, dataset.n, dataset.n)
        if np.unique(dataset.a[idx]).size < 2:
            skipped += 1
            continue
        try:
            values.append(estimator(dataset.subset(idx)))
            # scipy's root-finder wrapper forms a reference cycle that pins the score arrays
            gc.collect()
        except (SolverError, NuisanceError, DataError, FloatingPointError) as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            failed += 1
    bad = skipped + failed
    if bad > max_failure_rate * B or len(values) < 2:
        raise SolverError(f"bootstrap: {bad} of {B} replicates failed "
                          f"({skipped} single-arm, {failed} fit failures)")
    values = np.asarray(values)
    se = float(np.std(values, ddof=1))
    return BootstrapResult(se=se, ci=_ci(estimate, se), estimates=values,
                           failures=failed, skipped_single_arm=skipped)


@dataclass(frozen=True)
class RiskContrast:
    t: float
    risk1: float
    risk0: float
    rd: float
    rr: float

    def to_dict(self) -> dict:
        return {"t": self.t, "risk1": self.risk1, "risk0": self.risk0, "rd": self.rd, "rr": self.rr}


def risk_contrasts(beta_hat: float, lambda_hat, times: Sequence[float],
                   tau: float | None = None) -> list[RiskContrast]:
    """Risk ``1 - exp{-Lambda(t) e^{beta a}}`` per arm, with difference and ratio."""
    out = []
    for t in times:
        t = float(t)
        if tau is not None and t > tau:
            raise ValueError(f"risk time {t:g} exceeds tau = {tau:g}")
        if t < 0:
            raise ValueError("risk time must be nonnegative")
        lam = float(lambda_hat(t)) if callable(lambda_hat) else float(lambda_hat)
        r1 = -np.expm1(-lam * np.exp(beta_hat))
        r0 = -np.expm1(-lam)
        rr = 1.0 if (r1 == 0 and r0 == 0) else (r1 / r0 if r0 != 0 else float("inf"))
        out.append(RiskContrast(t, float(r1), float(r0), float(r1 - r0), float(rr)))
    return out
