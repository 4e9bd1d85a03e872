"""Working models for the propensity score and the conditional event/censoring laws.

Built-in estimators are a logistic propensity model fitted by IRLS and Cox
working models fitted by Newton-Raphson on the Breslow partial likelihood.
Anything that follows :class:`PropensityEstimator` /
:class:`ConditionalSurvivalEstimator` can be plugged into :class:`NuisanceSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import NuisanceError, SeparationError

Target = Literal["event", "censoring"]

DEFAULT_CLIP_PS = (0.1, 0.9)
DEFAULT_CLIP_SURV = 0.05
DIVERGENCE_NORM = 30.0
STEP_TOL = 1e-6


# ---------------------------------------------------------------------------
# Logistic propensity model

@dataclass(frozen=True, eq=False)
class PropensityModel:
    gamma: np.ndarray
    converged: bool = True
    n_iter: int = 0

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return expit(self.gamma[0] + z @ self.gamma[1:])

    def to_dict(self) -> dict:
        return {"model": "logistic", "gamma": self.gamma.tolist(),
                "converged": self.converged, "n_iter": self.n_iter}


def _check_rank(X: np.ndarray, what: str) -> None:
    if X.shape[1] and np.linalg.matrix_rank(X) < X.shape[1]:
        raise NuisanceError(f"{what}: design matrix is rank deficient (collinear columns)")


def fit_logistic(dataset: Dataset, max_iter: int = 100, tol: float = 1e-10) -> PropensityModel:
    """Logistic regression of treatment on covariates by IRLS with step-halving."""
    y = dataset.a.astype(float)
    if y.min() == y.max():
        raise NuisanceError("propensity model: only one treatment arm present")
    X = np.column_stack([np.ones(dataset.n), dataset.z])
    _check_rank(X, "propensity model")

    def loglik(g):
        eta = X @ g
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    gamma = np.zeros(X.shape[1])
    ll = loglik(gamma)
    for it in range(1, max_iter + 1):
        mu = expit(X @ gamma)
        grad = X.T @ (y - mu)
        w = mu * (1 - mu)
        info = X.T @ (X * w[:, None])
        step = np.linalg.lstsq(info, grad, rcond=None)[0]
        if np.max(np.abs(grad)) <= tol and np.max(np.abs(step)) <= STEP_TOL:
            return PropensityModel(gamma, True, it - 1)
        for _ in range(60):
            cand = gamma + step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        gamma, ll = cand, ll_new
        if np.linalg.norm(gamma) > DIVERGENCE_NORM:
            direction = gamma / np.linalg.norm(gamma)
            names = ["intercept"] + [f"z{j + 1}" for j in range(dataset.p)]
            worst = names[int(np.argmax(np.abs(direction)))]
            raise SeparationError(
                "propensity model: perfect separation, coefficients diverge along "
                f"direction {np.round(direction, 3).tolist()} (dominant term: {worst})")
    mu = expit(X @ gamma)
    converged = bool(np.max(np.abs(X.T @ (y - mu))) <= tol)
    return PropensityModel(gamma, converged, max_iter)


def predict_propensity(model: PropensityModel, z, clip: tuple[float, float] = DEFAULT_CLIP_PS):
    p = model.predict(z)
    p = np.clip(p, clip[0], clip[1])
    return float(p[0]) if np.ndim(z) <= 1 else p


# ---------------------------------------------------------------------------
# Cox partial likelihood (Breslow ties)

@dataclass(frozen=True)
class CoxPLFit:
    theta: np.ndarray
    loglik: float
    score: np.ndarray
    information: np.ndarray
    event_times: np.ndarray
    baseline_jumps: np.ndarray
    n_iter: int
    converged: bool


class _RiskSets:
    """Sorted bookkeeping of tied event groups for Breslow sums."""

    def __init__(self, time, event, weights=None):
        order = np.argsort(time, kind="stable")
        self.order = order
        t = np.asarray(time, float)[order]
        self.event = np.asarray(event, float)[order]
        self.w = np.ones_like(t) if weights is None else np.asarray(weights, float)[order]
        uniq, first = np.unique(t, return_index=True)
        d = np.add.reduceat(self.event * self.w, first)
        keep = d > 0
        self.times = uniq[keep]
        self.first = first[keep]
        self.d = d[keep]
        self.group_starts = first
        self.group_keep = keep

    def rev_at_first(self, values):
        """sum over the risk set ``{time >= t_g}`` for each event group."""
        rc = np.cumsum(values[::-1], axis=0)[::-1]
        return rc[self.first]

    def event_sum(self, values):
        return np.add.reduceat(values * (self.event * self.w).reshape((-1,) + (1,) * (values.ndim - 1)),
                               self.group_starts, axis=0)[self.group_keep]


def _cox_terms(rs: _RiskSets, X: np.ndarray, theta: np.ndarray, need_info: bool = True):
    eta = X @ theta if X.shape[1] else np.zeros(X.shape[0])
    shift = eta.max() if eta.size else 0.0
    r = rs.w * np.exp(eta - shift)
    s0 = rs.rev_at_first(r)
    ll = float(np.sum(rs.event * rs.w * eta) - np.sum(rs.d * (np.log(s0) + shift)))
    if X.shape[1] == 0:
        return ll, np.zeros(0), np.zeros((0, 0)), s0, shift
    s1 = rs.rev_at_first(r[:, None] * X)
    xbar = s1 / s0[:, None]
    score = rs.event_sum(X).sum(axis=0) - np.sum(rs.d[:, None] * xbar, axis=0)
    info = None
    if need_info:
        s2 = rs.rev_at_first(r[:, None, None] * X[:, :, None] * X[:, None, :])
        info = np.einsum("g,gjk->jk", rs.d, s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return ll, score, info, s0, shift


def cox_partial_likelihood(time, event, X, weights=None, max_iter: int = 100,
                           tol: float = 1e-8, what: str = "Cox model") -> CoxPLFit:
    """Newton-Raphson for the Breslow partial likelihood.

    Raises :class:`SeparationError` once the coefficient norm exceeds 30
    (monotone likelihood).
    """
    time = np.asarray(time, float)
    event = np.asarray(event, float)
    X = np.asarray(X, float).reshape(time.shape[0], -1)
    if event.sum() == 0:
        raise NuisanceError(f"{what}: no target events")
    _check_rank(X, what)
    rs = _RiskSets(time, event, weights)
    Xs = X[rs.order]
    theta = np.zeros(X.shape[1])
    ll, score, info, s0, shift = _cox_terms(rs, Xs, theta)
    n_iter, converged = 0, X.shape[1] == 0
    while not converged and n_iter < max_iter:
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        # a vanishing score alone is not enough: under monotone likelihood the
        # score decays like the information and the Newton step stays near 1
        if np.max(np.abs(score)) <= tol and np.max(np.abs(step)) <= STEP_TOL:
            converged = True
            break
        n_iter += 1
        for _ in range(60):
            cand = theta + step
            ll_c, score_c, info_c, s0_c, shift_c = _cox_terms(rs, Xs, cand)
            if ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = step / 2
        theta, ll, score, info, s0, shift = cand, ll_c, score_c, info_c, s0_c, shift_c
        if np.linalg.norm(theta) > DIVERGENCE_NORM:
            raise SeparationError(
                f"{what}: monotone likelihood, coefficients diverge "
                f"(theta = {np.round(theta, 3).tolist()})")
    jumps = rs.d / (s0 * np.exp(shift))
    return CoxPLFit(theta=theta, loglik=ll, score=score, information=info,
                    event_times=rs.times, baseline_jumps=jumps, n_iter=n_iter,
                    converged=converged)


def breslow_baseline(time, event, X, theta, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Breslow jumps ``d_j / sum_{risk set} w exp(theta'x)`` at distinct event times."""
    time = np.asarray(time, float)
    X = np.asarray(X, float).reshape(time.shape[0], -1)
    rs = _RiskSets(time, event, weights)
    _, _, _, s0, shift = _cox_terms(rs, X[rs.order], np.asarray(theta, float), need_info=False)
    return rs.times, rs.d / (s0 * np.exp(shift))


# ---------------------------------------------------------------------------
# Cox working models for S(t; a, z) and S_c(t; a, z)

def _step_eval(times: np.ndarray, cum: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Right-continuous step function with value 0 before ``times[0]``."""
    idx = np.searchsorted(times, t, side="right")
    return np.concatenate([[0.0], cum])[idx]


@dataclass(frozen=True, eq=False)
class CoxWorkingModel:
    theta: np.ndarray
    jump_times: np.ndarray
    jumps: np.ndarray
    target: Target
    converged: bool = True

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.jumps)

    def baseline(self, t) -> np.ndarray:
        return _step_eval(self.jump_times, self.cumulative, np.asarray(t, float))

    def linear_predictor(self, a, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, float))
        a = np.broadcast_to(np.asarray(a, float), (z.shape[0],))
        return self.theta[0] * a + z @ self.theta[1:] if self.theta.size else np.zeros(z.shape[0])

    def predict(self, grid, a, z) -> np.ndarray:
        """Unclipped ``exp(-Lambda0(t) exp(theta'(a, z)))``, shape ``(n, len(grid))``."""
        lam = self.baseline(grid)
        return np.exp(-np.exp(self.linear_predictor(a, z))[:, None] * lam[None, :])

    def to_dict(self) -> dict:
        return {"model": "cox", "target": self.target, "theta": self.theta.tolist(),
                "baseline": [[float(t), float(c)] for t, c in zip(self.jump_times, self.cumulative)],
                "converged": self.converged}


def target_events(dataset: Dataset, target: Target) -> np.ndarray:
    """Event indicator for the requested working model.

    Censoring at exactly ``tau`` is administrative and is not a censoring event.
    """
    if target == "event":
        return dataset.delta.astype(float)
    if target == "censoring":
        return ((dataset.delta == 0) & (dataset.x < dataset.tau)).astype(float)
    raise ValueError(f"unknown target {target!r}")


def fit_cox_working(dataset: Dataset, target: Target = "event", covariates: bool = True) -> CoxWorkingModel:
    ev = target_events(dataset, target)
    if ev.sum() == 0:
        raise NuisanceError(f"{target} working model: no target events")
    X = np.column_stack([dataset.a, dataset.z]) if covariates else np.zeros((dataset.n, 0))
    fit = cox_partial_likelihood(dataset.x, ev, X, what=f"{target} working model")
    return CoxWorkingModel(theta=fit.theta, jump_times=fit.event_times, jumps=fit.baseline_jumps,
                           target=target, converged=fit.converged)


def predict_conditional_survival(model, grid, a, z, clip_floor: float = DEFAULT_CLIP_SURV) -> np.ndarray:
    grid = np.asarray(grid, float)
    single = np.ndim(z) <= 1
    s = model.predict(grid, a, np.atleast_2d(z) if not single else np.asarray(z, float).reshape(1, -1))
    s = np.where(grid[None, :] <= 0, 1.0, s)
    s = np.maximum(s, clip_floor)
    return s[0] if single else s


# ---------------------------------------------------------------------------
# Estimator contract and built-ins

class PropensityEstimator(Protocol):
    def fit(self, dataset: Dataset): ...


class ConditionalSurvivalEstimator(Protocol):
    """``fit(dataset, target)`` returns an object with ``predict(grid, a, z)``
    (unclipped survival, shape ``(n, len(grid))``) and ``jump_times``."""

    def fit(self, dataset: Dataset, target: Target): ...


class LogisticPropensity:
    name = "logit"

    def fit(self, dataset: Dataset) -> PropensityModel:
        return fit_logistic(dataset)


@dataclass(frozen=True)
class ConstantPropensityModel:
    c: float

    def predict(self, z) -> np.ndarray:
        return np.full(np.atleast_2d(z).shape[0], self.c)

    def to_dict(self) -> dict:
        return {"model": "constant", "c": self.c}


@dataclass(frozen=True)
class ConstantPropensity:
    c: float = 0.5
    name = "const"

    def fit(self, dataset: Dataset) -> ConstantPropensityModel:
        return ConstantPropensityModel(self.c)


class CoxSurvival:
    name = "Cox"

    def fit(self, dataset: Dataset, target: Target) -> CoxWorkingModel:
        return fit_cox_working(dataset, target)


class MarginalSurvival:
    """Covariate-free Breslow/Nelson-Aalen fit (ignores both a and z)."""

    name = "marginal"

    def fit(self, dataset: Dataset, target: Target) -> CoxWorkingModel:
        return fit_cox_working(dataset, target, covariates=False)


@dataclass(frozen=True)
class UnitSurvivalModel:
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, grid, a, z) -> np.ndarray:
        return np.ones((np.atleast_2d(z).shape[0], np.size(grid)))

    def to_dict(self) -> dict:
        return {"model": "unit"}


class UnitSurvival:
    name = "unit"

    def fit(self, dataset: Dataset, target: Target) -> UnitSurvivalModel:
        return UnitSurvivalModel()


@dataclass(frozen=True, eq=False)
class KnownSurvivalModel:
    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, grid, a, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, float))
        a = np.broadcast_to(np.asarray(a, float), (z.shape[0],))
        return np.asarray(self.fn(np.asarray(grid, float), a, z), float)

    def to_dict(self) -> dict:
        return {"model": "known"}


@dataclass(frozen=True, eq=False)
class KnownSurvival:
    """Plug in an analytic ``fn(grid, a, z) -> (n, len(grid))`` survival function."""

    fn: Callable
    name: str = "true"

    def fit(self, dataset: Dataset, target: Target) -> KnownSurvivalModel:
        return KnownSurvivalModel(self.fn)


@dataclass(frozen=True, eq=False)
class NuisanceTriple:
    """Fitted ``(pi, S, S_c)`` with clipping applied on evaluation."""

    propensity: object
    survival: object
    censoring: object
    clip_ps: tuple[float, float] = DEFAULT_CLIP_PS
    clip_surv: float = DEFAULT_CLIP_SURV

    def pi_hat(self, z) -> np.ndarray:
        return np.clip(self.propensity.predict(np.atleast_2d(z)), *self.clip_ps)

    def s_hat(self, grid, a, z) -> np.ndarray:
        return predict_conditional_survival(self.survival, grid, a, np.atleast_2d(z), self.clip_surv)

    def sc_hat(self, grid, a, z) -> np.ndarray:
        return predict_conditional_survival(self.censoring, grid, a, np.atleast_2d(z), self.clip_surv)

    @property
    def jump_times(self) -> np.ndarray:
        parts = [np.asarray(getattr(m, "jump_times", np.zeros(0)), float)
                 for m in (self.survival, self.censoring)]
        return np.unique(np.concatenate(parts))

    def converged(self) -> bool:
        return all(getattr(m, "converged", True) for m in (self.propensity, self.survival, self.censoring))

    def to_dict(self) -> dict:
        return {"propensity": self.propensity.to_dict(), "survival": self.survival.to_dict(),
                "censoring": self.censoring.to_dict(), "clip_ps": list(self.clip_ps),
                "clip_surv": self.clip_surv}


@dataclass(frozen=True, eq=False)
class NuisanceSpec:
    """Recipe for fitting a :class:`NuisanceTriple` on a training sample."""

    propensity: object = field(default_factory=LogisticPropensity)
    survival: object = field(default_factory=CoxSurvival)
    censoring: object = field(default_factory=CoxSurvival)
    clip_ps: tuple[float, float] = DEFAULT_CLIP_PS
    clip_surv: float = DEFAULT_CLIP_SURV

    def fit(self, dataset: Dataset) -> NuisanceTriple:
        return NuisanceTriple(
            propensity=self.propensity.fit(dataset),
            survival=self.survival.fit(dataset, "event"),
            censoring=self.censoring.fit(dataset, "censoring"),
            clip_ps=self.clip_ps, clip_surv=self.clip_surv)

    @property
    def label(self) -> str:
        return (f"{getattr(self.survival, 'name', '?')}/{getattr(self.censoring, 'name', '?')}"
                f"-{getattr(self.propensity, 'name', '?')}")


def identity_nuisance(c: float = 0.5) -> NuisanceTriple:
    """Constant propensity ``c`` with unit event and censoring survival, unclipped."""
    if not 0 < c < 1:
        raise ValueError("identity nuisance requires 0 < c < 1")
    return NuisanceTriple(ConstantPropensityModel(c), UnitSurvivalModel(), UnitSurvivalModel(),
                          clip_ps=(0.0, 1.0), clip_surv=0.0)


def identity_spec(c: float = 0.5) -> NuisanceSpec:
    if not 0 < c < 1:
        raise ValueError("identity nuisance requires 0 < c < 1")
    return NuisanceSpec(ConstantPropensity(c), UnitSurvival(), UnitSurvival(),
                        clip_ps=(0.0, 1.0), clip_surv=0.0)


def default_spec(clip_ps: Sequence[float] = DEFAULT_CLIP_PS,
                 clip_surv: float = DEFAULT_CLIP_SURV) -> NuisanceSpec:
    return NuisanceSpec(clip_ps=tuple(clip_ps), clip_surv=clip_surv)
