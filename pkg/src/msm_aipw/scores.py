"""Augmented counting-process increments and risk terms on a shared time grid.

Every working-model output is a step function once fitted, so all the
``dt``-integrals reduce to sums over the grid: ``dS``, ``dLambda_c``, ``dN``
and ``dN_c`` are increments between consecutive grid points (with the value
at time 0 taken as 1 for survival functions).

The risk terms are linear in ``exp(beta)``::

    Gamma0(t; beta) = P0(t) + exp(beta) * Q(t)
    Gamma1(t; beta) =         exp(beta) * Q(t)

so only ``P0`` and ``Q`` are stored.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, SurvivalRecord
from .errors import DataError

log = logging.getLogger(__name__)

EPS_DEN = 1e-8


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function, zero before ``times[0]``."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.concatenate([[0.0], self.values])[idx]
        return float(out) if out.ndim == 0 else out

    def pairs(self) -> list[list[float]]:
        return [[float(t), float(v)] for t, v in zip(self.times, self.values)]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.ndim != 1 or t.size == 0:
            raise DataError("time grid is empty")
        if np.any(np.diff(t) <= 0) or t[0] <= 0:
            raise DataError("time grid must be strictly increasing and positive")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.size


def build_time_grid(dataset: Dataset, nuisance=None, extra_times: Sequence[float] = ()) -> TimeGrid:
    """Union of observed event, censoring and working-model jump times in ``(0, tau]``.

    ``nuisance`` may be a single fitted triple or a sequence of them (one per fold).
    """
    parts = [dataset.x, np.asarray(extra_times, float)]
    if nuisance is not None:
        for nu in (nuisance if isinstance(nuisance, (list, tuple)) else [nuisance]):
            parts.append(nu.jump_times)
    t = np.unique(np.concatenate(parts))
    t = t[(t > 0) & (t <= dataset.tau)]
    if t.size == 0:
        raise DataError("time grid is empty: no positive event, censoring or jump times")
    return TimeGrid(t)


def _lagged(values: np.ndarray) -> np.ndarray:
    """Value at the previous grid point, 1 at time 0."""
    return np.concatenate([np.ones((values.shape[0], 1)), values[:, :-1]], axis=1)


def _counting(x, delta, grid):
    x = np.asarray(x, float)[:, None]
    hit = x == grid[None, :]
    d = np.asarray(delta)[:, None]
    return hit & (d == 1), hit & (d == 0), x >= grid[None, :]


def censoring_martingale_increments(record: SurvivalRecord, nuisance, a: int, grid: TimeGrid) -> np.ndarray:
    """``dM_c(u; a) = dN_c(u) - Y(u) dLambda_c(u; a, z)`` on the grid."""
    g = grid.times
    z = np.asarray(record.z, float).reshape(1, -1)
    sc = nuisance.sc_hat(g, a, z)
    dlc = np.log(_lagged(sc)) - np.log(sc)
    _, dnc, y = _counting([record.x], [record.delta], g)
    return (dnc.astype(float) - y * dlc)[0]


@dataclass(frozen=True, eq=False)
class ScoreBatch:
    """Per-subject score arrays, shape ``(n, G)`` unless noted."""

    grid: TimeGrid
    dN0: np.ndarray
    dN1: np.ndarray
    P0: np.ndarray
    Q: np.ndarray
    j0: np.ndarray
    j1: np.ndarray

    @property
    def n(self) -> int:
        return self.dN0.shape[0]

    def gamma0(self, beta: float) -> np.ndarray:
        return self.P0 + np.exp(beta) * self.Q

    def gamma1(self, beta: float) -> np.ndarray:
        return np.exp(beta) * self.Q

    def subject(self, i: int) -> "SubjectScores":
        return SubjectScores(self.dN0[i], self.dN1[i], self.P0[i], self.Q[i], self.j0[i], self.j1[i])

    def take(self, index) -> "ScoreBatch":
        return ScoreBatch(self.grid, self.dN0[index], self.dN1[index], self.P0[index],
                          self.Q[index], self.j0[index], self.j1[index])


@dataclass(frozen=True, eq=False)
class SubjectScores:
    dN0: np.ndarray
    dN1: np.ndarray
    P0: np.ndarray
    Q: np.ndarray
    j0: np.ndarray
    j1: np.ndarray

    def gamma0(self, beta: float) -> np.ndarray:
        return self.P0 + np.exp(beta) * self.Q

    def gamma1(self, beta: float) -> np.ndarray:
        return np.exp(beta) * self.Q


def compute_scores(x, delta, a, z, nuisance, grid: TimeGrid) -> ScoreBatch:
    g = grid.times
    a = np.asarray(a, float)
    z = np.asarray(z, float).reshape(a.shape[0], -1)
    n = a.shape[0]

    pi = nuisance.pi_hat(z) if n else np.zeros(0)
    s = [nuisance.s_hat(g, arm, z) for arm in (0, 1)]
    sc = [nuisance.sc_hat(g, arm, z) for arm in (0, 1)]
    lo, hi = nuisance.clip_ps
    assert np.all((pi >= lo) & (pi <= hi)), "propensity outside its clip interval"
    assert all(np.all(v >= nuisance.clip_surv) for v in (*s, *sc)), "survival below its clip floor"

    dn, dnc, y = _counting(np.asarray(x, float), np.asarray(delta), g)
    dn = dn.astype(float)
    y = y.astype(float)
    ds = [v - _lagged(v) for v in s]
    j = []
    for arm in (0, 1):
        dlc = np.log(_lagged(sc[arm])) - np.log(sc[arm])
        dmc = dnc - y * dlc
        j.append(np.cumsum(dmc / (s[arm] * sc[arm]), axis=1))

    A = a[:, None]
    pi_c = pi[:, None]
    pt = A * pi_c + (1 - A) * (1 - pi_c)
    w1 = A / pi_c
    w0 = (1 - A) / (1 - pi_c)
    s_A = np.where(A == 1, s[1], s[0])
    sc_A = np.where(A == 1, sc[1], sc[0])
    ds_A = np.where(A == 1, ds[1], ds[0])

    ipw_dn = dn / (pt * sc_A) + ds_A / pt
    aug0 = (1 + w0 * j[0]) * ds[0]
    aug1 = (1 + w1 * j[1]) * ds[1]
    dN0 = ipw_dn - aug0 - aug1
    dN1 = A * ipw_dn - aug1

    base = y / (pt * sc_A) - s_A / pt
    P0 = (1 - A) * base + (1 + w0 * j[0]) * s[0]
    Q = A * base + (1 + w1 * j[1]) * s[1]
    return ScoreBatch(grid, dN0, dN1, P0, Q, j[0], j[1])


def compute_dataset_scores(dataset: Dataset, nuisance, grid: TimeGrid, index=None,
                           block_cells: int = 2_000_000) -> ScoreBatch:
    """Scores for ``dataset`` rows ``index`` (all rows by default).

    Subjects are processed in blocks of about ``block_cells / len(grid)`` rows
    to bound the size of intermediate arrays.
    """
    idx = np.arange(dataset.n) if index is None else np.asarray(index)
    step = max(1, block_cells // len(grid))
    if idx.size <= step:
        return compute_scores(dataset.x[idx], dataset.delta[idx], dataset.a[idx], dataset.z[idx],
                              nuisance, grid)
    names = ("dN0", "dN1", "P0", "Q", "j0", "j1")
    out = {f: np.empty((idx.size, len(grid))) for f in names}
    for i in range(0, idx.size, step):
        b = idx[i:i + step]
        part = compute_scores(dataset.x[b], dataset.delta[b], dataset.a[b], dataset.z[b], nuisance, grid)
        for f in names:
            out[f][i:i + b.size] = getattr(part, f)
    return ScoreBatch(grid, **out)


def compute_subject_scores(record: SurvivalRecord, nuisance, grid: TimeGrid) -> SubjectScores:
    batch = compute_scores([record.x], [record.delta], [record.a],
                           np.asarray(record.z, float).reshape(1, -1), nuisance, grid)
    return batch.subject(0)


@dataclass(frozen=True, eq=False)
class AggregatedScores:
    s0: np.ndarray
    s1: np.ndarray
    abar: np.ndarray
    v: np.ndarray
    guard_count: int


def _mean_rows(items, attr):
    if isinstance(items, ScoreBatch):
        return getattr(items, attr).mean(axis=0)
    return np.mean([getattr(it, attr) for it in items], axis=0)


def aggregate_scores(scores: ScoreBatch | Sequence[SubjectScores], beta: float,
                     eps_den: float = EPS_DEN) -> AggregatedScores:
    if not isinstance(scores, ScoreBatch) and len(scores) == 0:
        raise ValueError("cannot aggregate an empty list of subject scores")
    return aggregate_from_means(_mean_rows(scores, "P0"), _mean_rows(scores, "Q"), beta, eps_den)


def aggregate_from_means(p0bar: np.ndarray, qbar: np.ndarray, beta: float,
                         eps_den: float = EPS_DEN) -> AggregatedScores:
    eb = np.exp(beta)
    s1 = eb * qbar
    s0 = p0bar + s1
    low = s0 <= eps_den
    guard = int(np.count_nonzero(low))
    if guard:
        log.debug("denominator guard active at %d grid points (beta=%g)", guard, beta)
    abar = s1 / np.where(low, eps_den, s0)
    return AggregatedScores(s0=s0, s1=s1, abar=abar, v=abar - abar ** 2, guard_count=guard)
