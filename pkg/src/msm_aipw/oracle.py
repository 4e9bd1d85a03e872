"""Well-specified estimands from analytic potential-outcome laws.

For laws of ``T(0)`` and ``T(1)`` on ``[0, tau]`` the time-averaged log hazard
ratio ``beta*`` solves

    h(beta) = int_0^tau {E(beta(t), t) - E(beta, t)} (f0 + f1)(t) dt = 0,
    E(beta, t) = e^beta S1(t) / {S0(t) + e^beta S1(t)},

and ``Lambda*(t) = int_0^t (f0 + f1) / (S0 + e^beta* S1)``.  Because
``E(beta(t), t) (f0 + f1) = f1``, the first term integrates to ``F1(tau)`` and
hazards never need to be divided out.  All integrals use the composite
midpoint rule; breakpoints of the law are inserted as panel edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .errors import SolverError

DEFAULT_PANELS = 20_000


class LawError(ValueError):
    """Invalid or degenerate potential-outcome law descriptor."""


# ---------------------------------------------------------------------------
# Laws

class PotentialOutcomeLaw:
    """Survival ``S_a(t)`` and density ``f_a(t)`` of ``T(a)``, ``a = 0, 1``.

    Subclasses implement :meth:`survival` and :meth:`density`; both take an
    arm and an array of times and return an array of the same shape.
    """

    #: heavy right tails are integrated on log-spaced panels
    heavy_tail: bool = False

    def survival(self, a: int, t) -> np.ndarray:
        raise NotImplementedError

    def density(self, a: int, t) -> np.ndarray:
        raise NotImplementedError

    def hazard(self, a: int, t) -> np.ndarray:
        s = self.survival(a, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, self.density(a, t) / s, np.nan)

    def breakpoints(self) -> tuple[float, ...]:
        """Times where a density is discontinuous."""
        return ()


class ArmwiseLaw(PotentialOutcomeLaw):
    """Each arm given by a frozen ``scipy.stats`` continuous distribution."""

    def __init__(self, arm0, arm1, breaks: Sequence[float] = (), heavy_tail: bool = False):
        self.arms = (arm0, arm1)
        self._breaks = tuple(float(b) for b in breaks)
        self.heavy_tail = heavy_tail

    def survival(self, a, t):
        return self.arms[a].sf(np.asarray(t, float))

    def density(self, a, t):
        return self.arms[a].pdf(np.asarray(t, float))

    def breakpoints(self):
        return self._breaks


class GRhoLaw(PotentialOutcomeLaw):
    """Transformation model ``log T(a) = gamma a + eps`` with ``eps`` in the G-rho family.

    ``S_a(t) = (1 + rho t e^{-gamma a})^{-1/rho}``, and ``exp(-t e^{-gamma a})``
    at ``rho = 0``.  ``rho = 1`` is the proportional-odds model.
    """

    heavy_tail = True

    def __init__(self, gamma: float, rho: float):
        if rho < 0:
            raise LawError("rho must be nonnegative")
        self.gamma = float(gamma)
        self.rho = float(rho)

    def _x(self, a, t):
        return np.asarray(t, float) * math.exp(-self.gamma * a)

    def survival(self, a, t):
        x = self._x(a, t)
        if self.rho == 0:
            return np.exp(-x)
        return (1 + self.rho * x) ** (-1 / self.rho)

    def density(self, a, t):
        x = self._x(a, t)
        scale = math.exp(-self.gamma * a)
        if self.rho == 0:
            return scale * np.exp(-x)
        return scale * (1 + self.rho * x) ** (-1 / self.rho - 1)


@dataclass(frozen=True)
class UniformCovariate:
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.hi > self.lo:
            raise LawError("covariate interval must have hi > lo")


class ConditionalLaw:
    """Conditional survival/density of ``T(a)`` given a scalar covariate ``z``.

    ``survival(a, t, z)`` broadcasts ``t`` (shape ``(G, 1)``) against ``z``
    (shape ``(1, K)``).
    """

    def survival(self, a, t, z):
        raise NotImplementedError

    def density(self, a, t, z):
        raise NotImplementedError

    def z_breakpoints(self) -> tuple[float, ...]:
        return ()

    def t_breakpoints(self) -> tuple[float, ...]:
        return ()


class ConditionalCox(ConditionalLaw):
    """Hazard ``exp(alpha + beta_a a + beta_z z)``, constant in ``t``."""

    def __init__(self, alpha: float, beta_a: float, beta_z: float):
        self.alpha, self.beta_a, self.beta_z = float(alpha), float(beta_a), float(beta_z)

    def rate(self, a, z):
        return np.exp(self.alpha + self.beta_a * a + self.beta_z * np.asarray(z, float))

    def survival(self, a, t, z):
        return np.exp(-np.asarray(t, float) * self.rate(a, z))

    def density(self, a, t, z):
        r = self.rate(a, z)
        return r * np.exp(-np.asarray(t, float) * r)


class CoxUniformMixture(ConditionalLaw):
    """Cox hazard for ``z <= split``, ``Unif(0, upper)`` for ``z > split``."""

    def __init__(self, cox: ConditionalCox, split: float = 0.0, upper: float = 1.05):
        if upper <= 0:
            raise LawError("uniform upper bound must be positive")
        self.cox, self.split, self.upper = cox, float(split), float(upper)

    def survival(self, a, t, z):
        t = np.asarray(t, float)
        z = np.asarray(z, float)
        unif = np.clip(1 - t / self.upper, 0, 1)
        return np.where(z <= self.split, self.cox.survival(a, t, z), unif)

    def density(self, a, t, z):
        t = np.asarray(t, float)
        z = np.asarray(z, float)
        unif = np.where((t >= 0) & (t < self.upper), 1 / self.upper, 0.0)
        return np.where(z <= self.split, self.cox.density(a, t, z), unif)

    def z_breakpoints(self):
        return (self.split,)

    def t_breakpoints(self):
        return (self.upper,)


class MarginalizedLaw(PotentialOutcomeLaw):
    """``S_a(t) = E_Z S(t | a, Z)`` by Gauss-Legendre quadrature over ``Z``.

    The covariate interval is split at the conditional law's breakpoints so the
    integrand is smooth on every piece.
    """

    def __init__(self, conditional: ConditionalLaw, covariate: UniformCovariate,
                 nodes: int = 96):
        self.conditional = conditional
        self.covariate = covariate
        cuts = [covariate.lo]
        cuts += [b for b in sorted(conditional.z_breakpoints()) if covariate.lo < b < covariate.hi]
        cuts.append(covariate.hi)
        x, w = np.polynomial.legendre.leggauss(nodes)
        zs, ws = [], []
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            # nodes sit strictly inside each piece, so z == breakpoint is never evaluated
            zs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            ws.append(0.5 * (hi - lo) * w)
        self._z = np.concatenate(zs)[None, :]
        self._w = np.concatenate(ws) / (covariate.hi - covariate.lo)

    def _integrate(self, fn, a, t):
        t = np.asarray(t, float)
        vals = fn(a, t.reshape(-1, 1), self._z) @ self._w
        return vals.reshape(t.shape)

    def survival(self, a, t):
        return self._integrate(self.conditional.survival, a, t)

    def density(self, a, t):
        return self._integrate(self.conditional.density, a, t)

    def breakpoints(self):
        return self.conditional.t_breakpoints()


def marginalize(conditional: ConditionalLaw, covariate: UniformCovariate | None = None,
                nodes: int = 96) -> MarginalizedLaw:
    """Marginal potential-outcome law implied by a conditional law and ``Z ~ Unif``."""
    return MarginalizedLaw(conditional, covariate or UniformCovariate(), nodes)


def ph_exponential(rate: float = 1.0, log_ratio: float = -1.0) -> ArmwiseLaw:
    """Exponential arms with hazards ``rate`` and ``rate * exp(log_ratio)``."""
    if rate <= 0:
        raise LawError("rate must be positive")
    return ArmwiseLaw(stats.expon(scale=1 / rate),
                      stats.expon(scale=1 / (rate * math.exp(log_ratio))))


def _arm_distribution(spec: Mapping[str, Any]):
    dist = spec.get("dist")
    try:
        if dist == "exponential":
            rate = float(spec["rate"])
            if rate <= 0:
                raise LawError("exponential rate must be positive")
            return stats.expon(scale=1 / rate), (), False
        if dist == "lognormal":
            sigma = float(spec.get("sigma", 1.0))
            if sigma <= 0:
                raise LawError("lognormal sigma must be positive")
            return stats.lognorm(s=sigma, scale=math.exp(float(spec["mu"]))), (), True
        if dist == "uniform":
            upper = float(spec["upper"])
            if upper <= 0:
                raise LawError("uniform upper bound must be positive")
            return stats.uniform(0, upper), (upper,), False
        if dist == "loglogistic":
            # log T = mu + s * eps, eps standard logistic
            s = float(spec.get("scale", 1.0))
            if s <= 0:
                raise LawError("log-logistic scale must be positive")
            return stats.fisk(c=1 / s, scale=math.exp(float(spec["mu"]))), (), True
    except KeyError as exc:
        raise LawError(f"arm descriptor for {dist!r} lacks field {exc.args[0]!r}") from None
    raise LawError(f"unknown arm distribution {dist!r}")


def armwise(arm0: Mapping[str, Any], arm1: Mapping[str, Any]) -> ArmwiseLaw:
    d0, b0, h0 = _arm_distribution(arm0)
    d1, b1, h1 = _arm_distribution(arm1)
    return ArmwiseLaw(d0, d1, breaks=b0 + b1, heavy_tail=h0 or h1)


def supplementary_law(scenario: int) -> PotentialOutcomeLaw:
    """Marginal law of ``T(a)`` in the four supplementary (time-varying effect) designs."""
    if scenario in (1, 2):
        return marginalize(ConditionalCox(2.0, -1.12, -2.0))
    if scenario in (3, 4):
        return marginalize(CoxUniformMixture(ConditionalCox(5.0, -3.4, 2.5)))
    raise LawError("scenario must be 1, 2, 3 or 4")


def law_from_descriptor(desc: Mapping[str, Any]) -> PotentialOutcomeLaw:
    """Build a law from a JSON-style descriptor ``{"family": ..., ...}``.

    Families: ``ph_exponential`` (rate, log_ratio), ``lognormal`` (mu: [m0, m1],
    sigma), ``uniform`` (upper: [b0, b1]), ``logistic_aft`` (mu: [m0, m1], scale),
    ``transformation`` (gamma, rho), ``armwise`` (arms: [arm0, arm1]),
    ``conditional_cox_uniform_z`` (alpha, beta_a, beta_z, z_range) and
    ``mixture`` (alpha, beta_a, beta_z, split, upper, z_range).
    """
    if not isinstance(desc, Mapping):
        raise LawError("law descriptor must be a JSON object")
    family = desc.get("family")

    def pair(key):
        v = desc.get(key)
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            raise LawError(f"field {key!r} must be a list of two numbers")
        return [float(x) for x in v]

    def num(key, default=None):
        v = desc.get(key, default)
        if v is None:
            raise LawError(f"descriptor for {family!r} lacks field {key!r}")
        try:
            return float(v)
        except (TypeError, ValueError):
            raise LawError(f"field {key!r} must be a number") from None

    def z_range():
        lo, hi = desc.get("z_range", [-1.0, 1.0])
        return UniformCovariate(float(lo), float(hi))

    if family == "ph_exponential":
        return ph_exponential(num("rate", 1.0), num("log_ratio"))
    if family == "lognormal":
        mu = pair("mu")
        return armwise(*({"dist": "lognormal", "mu": m, "sigma": num("sigma", 1.0)} for m in mu))
    if family == "uniform":
        return armwise(*({"dist": "uniform", "upper": b} for b in pair("upper")))
    if family == "logistic_aft":
        mu = pair("mu")
        return armwise(*({"dist": "loglogistic", "mu": m, "scale": num("scale", 1.0)} for m in mu))
    if family == "transformation":
        return GRhoLaw(num("gamma"), num("rho"))
    if family == "armwise":
        arms = desc.get("arms")
        if not isinstance(arms, (list, tuple)) or len(arms) != 2:
            raise LawError("field 'arms' must list two arm descriptors")
        return armwise(arms[0], arms[1])
    if family == "conditional_cox_uniform_z":
        return marginalize(ConditionalCox(num("alpha"), num("beta_a"), num("beta_z")), z_range())
    if family == "mixture":
        cox = ConditionalCox(num("alpha"), num("beta_a"), num("beta_z"))
        return marginalize(CoxUniformMixture(cox, num("split", 0.0), num("upper", 1.05)), z_range())
    raise LawError(f"unknown law family {family!r}")


# ---------------------------------------------------------------------------
# Quadrature

@dataclass(frozen=True, eq=False)
class Panels:
    """Midpoint-rule panels on ``[0, tau]``."""

    edges: np.ndarray

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def width(self) -> np.ndarray:
        return np.diff(self.edges)


def make_panels(law: PotentialOutcomeLaw, tau: float, panels: int = DEFAULT_PANELS,
                spacing: str | None = None) -> Panels:
    """Uniform panels, or log-spaced ones for heavy-tailed laws, with law breakpoints as edges."""
    if not tau > 0:
        raise LawError("tau must be positive")
    spacing = spacing or ("log" if law.heavy_tail else "uniform")
    if spacing == "log":
        lo = tau * 1e-12
        edges = np.concatenate([[0.0], np.geomspace(lo, tau, panels)])
    elif spacing == "uniform":
        edges = np.linspace(0.0, tau, panels + 1)
    else:
        raise ValueError(f"unknown panel spacing {spacing!r}")
    inner = [b for b in law.breakpoints() if 0 < b < tau]
    if inner:
        edges = np.unique(np.concatenate([edges, inner]))
    return Panels(edges)


@dataclass(frozen=True, eq=False)
class _Tabulated:
    panels: Panels
    s0: np.ndarray
    s1: np.ndarray
    f0: np.ndarray
    f1: np.ndarray

    @classmethod
    def of(cls, law, panels):
        m = panels.mid
        return cls(panels, law.survival(0, m), law.survival(1, m),
                   law.density(0, m), law.density(1, m))

    def expected_a(self, beta):
        num = math.exp(beta) * self.s1
        den = self.s0 + num
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, 0.0)

    def h(self, beta):
        w = self.panels.width
        return float(self.f1 @ w - (self.expected_a(beta) * (self.f0 + self.f1)) @ w)


# ---------------------------------------------------------------------------
# Estimands

@dataclass(frozen=True, eq=False)
class EstimandSolution:
    """``beta*`` and ``Lambda*`` of a law on ``[0, tau]``.

    ``lambda_star`` is tabulated at the panel edges and interpolated linearly.
    """

    beta_star: float
    h_residual: float
    tau: float
    times: np.ndarray
    cumhaz: np.ndarray

    def lambda_star(self, t):
        t = np.asarray(t, float)
        if np.any(t > self.tau * (1 + 1e-12)) or np.any(t < 0):
            raise ValueError("t must lie in [0, tau]")
        out = np.interp(t, self.times, self.cumhaz)
        return float(out) if out.ndim == 0 else out

    def to_dict(self, points: int = 101) -> dict:
        ts = np.linspace(0.0, self.tau, points)
        return {"beta_star": self.beta_star, "h_residual": self.h_residual, "tau": self.tau,
                "lambda_star": [[float(t), float(v)] for t, v in zip(ts, self.lambda_star(ts))]}


def _solve_h(h: Callable[[float], float], what: str) -> float:
    width = 20.0
    while True:
        lo, hi = h(-width), h(width)
        if np.sign(lo) != np.sign(hi):
            break
        if width >= 50.0:
            raise SolverError(f"{what}: no root of h in [-50, 50]")
        width = min(1.5 * width, 50.0)
    return float(brentq(h, -width, width, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))


def beta_star(law: PotentialOutcomeLaw, tau: float, panels: int = DEFAULT_PANELS,
              spacing: str | None = None) -> EstimandSolution:
    """Time-averaged log hazard ratio ``beta*`` and ``Lambda*`` of ``law`` on ``[0, tau]``."""
    grid = make_panels(law, tau, panels, spacing)
    tab = _Tabulated.of(law, grid)
    w = grid.width
    mass = float((tab.f0 + tab.f1) @ w)
    if not np.isfinite(mass):
        raise LawError("law produced non-finite densities")
    if mass <= 1e-12:
        raise LawError("law has no event mass on [0, tau]")
    b = _solve_h(tab.h, "beta*")
    resid = abs(tab.h(b))
    eb = math.exp(b)
    den = tab.s0 + eb * tab.s1
    with np.errstate(invalid="ignore", divide="ignore"):
        inc = np.where(den > 0, (tab.f0 + tab.f1) / den, 0.0) * w
    return EstimandSolution(beta_star=b, h_residual=resid, tau=float(tau),
                            times=grid.edges, cumhaz=np.concatenate([[0.0], np.cumsum(inc)]))


def lambda_star(law: PotentialOutcomeLaw, tau: float, t, solution: EstimandSolution | None = None):
    """``Lambda*(t)``; solves for ``beta*`` first unless ``solution`` is given."""
    solution = solution or beta_star(law, tau)
    return solution.lambda_star(t)


def beta_star_randomized(law: PotentialOutcomeLaw, tau: float, panels: int = DEFAULT_PANELS,
                         spacing: str | None = None) -> float:
    """``beta*`` from the 1:1 randomized-trial form.

    Solves ``int {E_beta(t)(A | T=t) - E_beta*(A | T=t)} dF(t) = 0`` where ``T``
    is the observed time of a trial with ``P(A=1) = 1/2``, so ``dF = (f0+f1)/2``,
    and ``E_beta(A | T=t)`` is evaluated from the hazards.
    """
    grid = make_panels(law, tau, panels, spacing)
    m = grid.mid
    s = [law.survival(a, m) for a in (0, 1)]
    lam = [law.hazard(a, m) for a in (0, 1)]
    dF = 0.5 * (law.density(0, m) + law.density(1, m)) * grid.width
    live = (s[0] > 0) & (s[1] > 0) & (dF > 0)
    s0, s1, l0, l1, dF = s[0][live], s[1][live], lam[0][live], lam[1][live], dF[live]
    e_true = l1 * s1 / (l0 * s0 + l1 * s1)

    def h(beta):
        e = math.exp(beta) * s1 / (s0 + math.exp(beta) * s1)
        return float((e_true - e) @ dF)

    return _solve_h(h, "randomized beta*")


def beta_of_t(law: PotentialOutcomeLaw, t) -> np.ndarray | float:
    """Log hazard ratio ``log{lambda_1(t) / lambda_0(t)}``."""
    t = np.asarray(t, float)
    l0, l1 = law.hazard(0, t), law.hazard(1, t)
    if np.any(~(l0 > 0)) or np.any(~(l1 > 0)):
        raise ValueError("beta(t) needs both hazards positive")
    out = np.log(l1 / l0)
    return float(out) if out.ndim == 0 else out


def omega(law: PotentialOutcomeLaw, t, beta_star_value: float) -> np.ndarray:
    """Weight ``v(beta~, t) (f0 + f1)(t)`` with ``beta~`` the midpoint of ``beta(t)`` and ``beta*``.

    The exact intermediate value is not constructive, so this is for plotting only.
    """
    t = np.asarray(t, float)
    b = 0.5 * (np.asarray(beta_of_t(law, t)) + beta_star_value)
    s0, s1 = law.survival(0, t), law.survival(1, t)
    eb = np.exp(b)
    v = eb * s0 * s1 / (s0 + eb * s1) ** 2
    return v * (law.density(0, t) + law.density(1, t))


def transformation_model_check(gamma: float, rho: float, tau_large: float,
                               coverage: float = 0.999, panels: int = DEFAULT_PANELS) -> float:
    """``beta*`` of the G-rho transformation law, for comparison with ``-gamma/(rho+1)``."""
    law = GRhoLaw(gamma, rho)
    worst = max(float(law.survival(a, tau_large)) for a in (0, 1))
    if 1 - worst < coverage:
        raise LawError(f"tau = {tau_large:g} covers only {1 - worst:.6f} of the event mass; "
                       f"need at least {coverage}")
    return beta_star(law, tau_large, panels, spacing="log").beta_star
