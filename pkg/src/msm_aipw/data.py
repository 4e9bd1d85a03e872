"""Observed survival data: loading, validation, tau-truncation and fold splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class SurvivalRecord:
    x: float
    delta: int
    a: int
    z: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample of ``(X, Delta, A, Z)`` with follow-up horizon ``tau``.

    Records with ``x > tau`` are administratively censored at ``tau`` on
    construction, so every stored time lies in ``[0, tau]``.
    """

    x: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    z: np.ndarray
    tau: float
    require_both_arms: bool = field(default=True, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        n = x.shape[0]
        delta = np.asarray(self.delta, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(n, -1) if z.size else np.zeros((n, 0))
        tau = float(self.tau)
        if not tau > 0 or not np.isfinite(tau):
            raise DataError("tau must be a positive finite number")
        if n == 0:
            raise DataError("dataset is empty")
        if delta.shape[0] != n or a.shape[0] != n or z.shape[0] != n:
            raise DataError("columns have inconsistent lengths")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            raise DataError("non-finite time or covariate value")
        if np.any(x < 0):
            raise DataError("negative follow-up time")
        if not np.all(np.isin(delta, (0.0, 1.0))):
            raise DataError("event indicator must be 0 or 1")
        if not np.all(np.isin(a, (0.0, 1.0))):
            raise DataError("treatment indicator must be 0 or 1")
        if self.require_both_arms and (a.min() == a.max()):
            raise DataError("dataset contains a single treatment arm")
        over = x > tau
        if np.any(over):
            x = np.where(over, tau, x)
            delta = np.where(over, 0.0, delta)
        for name, value in (("x", x), ("delta", delta.astype(np.int64)),
                            ("a", a.astype(np.int64)), ("z", z)):
            value = np.array(value)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "tau", tau)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def records(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(float(self.x[i]), int(self.delta[i]), int(self.a[i]),
                               tuple(float(v) for v in self.z[i]))
                for i in range(self.n)]

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord], tau: float, **kwargs) -> "Dataset":
        records = list(records)
        if not records:
            raise DataError("dataset is empty")
        p = len(records[0].z)
        if any(len(r.z) != p for r in records):
            raise DataError("records have differing covariate dimension")
        z = np.array([r.z for r in records], dtype=float).reshape(len(records), p)
        return cls(x=[r.x for r in records], delta=[r.delta for r in records],
                   a=[r.a for r in records], z=z, tau=tau, **kwargs)

    def subset(self, index: Sequence[int] | np.ndarray, require_both_arms: bool = False) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.x[index], self.delta[index], self.a[index], self.z[index],
                       self.tau, require_both_arms=require_both_arms)

    def with_tau(self, tau: float) -> "Dataset":
        return Dataset(self.x, self.delta, self.a, self.z, tau,
                       require_both_arms=self.require_both_arms)

    def swap_treatment(self) -> "Dataset":
        """Relabel arms ``a -> 1 - a``."""
        return Dataset(self.x, self.delta, 1 - self.a, self.z, self.tau,
                       require_both_arms=self.require_both_arms)

    def equals(self, other: "Dataset") -> bool:
        return (self.tau == other.tau and np.array_equal(self.x, other.x)
                and np.array_equal(self.delta, other.delta)
                and np.array_equal(self.a, other.a) and np.array_equal(self.z, other.z))


def load_dataset(path: str | Path, tau: float) -> Dataset:
    """Read a ``time,event,treatment,z1..zp`` CSV file.

    Rows with ``time > tau`` are stored as censored at ``tau``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if any(cell.strip() for cell in row)]

    for col in ("time", "event", "treatment"):
        if col not in header:
            raise DataError(f"{path}: missing column '{col}'")
    zcols = []
    j = 1
    while f"z{j}" in header:
        zcols.append(f"z{j}")
        j += 1
    extra = [h for h in header if h.startswith("z") and h[1:].isdigit() and h not in zcols]
    if extra:
        raise DataError(f"{path}: missing column 'z{j}' (covariate columns must be z1..zp)")
    if not rows:
        raise DataError(f"{path}: empty file")

    cols = {name: header.index(name) for name in ("time", "event", "treatment", *zcols)}
    values = np.empty((len(rows), len(cols)))
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: line {r} has {len(row)} fields, expected {len(header)}")
        for c, (name, k) in enumerate(cols.items()):
            try:
                values[r - 2, c] = float(row[k])
            except ValueError:
                raise DataError(f"{path}: non-numeric value {row[k]!r} in column '{name}' "
                                f"(line {r})") from None
    return Dataset(x=values[:, 0], delta=values[:, 1], a=values[:, 2], z=values[:, 3:], tau=tau)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = ["time", "event", "treatment"] + [f"z{j + 1}" for j in range(dataset.p)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow([repr(float(dataset.x[i])), int(dataset.delta[i]), int(dataset.a[i]),
                        *(repr(float(v)) for v in dataset.z[i])])


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Partition of ``range(n)``; ``fold_of[i]`` is 1-based."""

    fold_of: np.ndarray
    k: int

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == m)

    def complement(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != m)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.fold_of == m)) for m in range(1, self.k + 1)]


def assign_folds(n: int, k: int, seed: int) -> FoldAssignment:
    if k < 1:
        raise ValueError("number of folds must be at least 1")
    if k > n:
        raise ValueError(f"number of folds ({k}) exceeds sample size ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k + 1
    return FoldAssignment(fold_of=fold_of, k=k)
