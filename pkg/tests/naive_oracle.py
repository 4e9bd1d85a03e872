"""Loop-by-loop re-implementation of the augmented scores, used as a test oracle.

Nothing here is vectorized or shared with the package: every quantity is
evaluated subject by subject and grid point by grid point, straight from the
definitions.  Only usable on tiny fixtures.
"""
import math


def subject_terms(x, delta, a, z, pi, s, sc, grid):
    """Per-grid-point ``dN^(l)``, ``Gamma^(l)`` coefficients and ``J_a`` for one subject.

    ``pi(z)``, ``s(t, arm, z)`` and ``sc(t, arm, z)`` must already be clipped.
    Returns a dict of lists indexed by grid position; ``gamma(l, beta, k)``
    evaluates the risk term.
    """
    G = len(grid)
    p = pi(z)
    pt = p if a == 1 else 1 - p
    w = {arm: (1.0 if a == arm else 0.0) / pt for arm in (0, 1)}

    def S(arm, k):
        return 1.0 if k < 0 else s(grid[k], arm, z)

    def Sc(arm, k):
        return 1.0 if k < 0 else sc(grid[k], arm, z)

    J = {0: [], 1: []}
    for arm in (0, 1):
        acc = 0.0
        for k in range(G):
            t = grid[k]
            dnc = 1.0 if (x == t and delta == 0) else 0.0
            y = 1.0 if x >= t else 0.0
            dlam_c = math.log(Sc(arm, k - 1)) - math.log(Sc(arm, k))
            dmc = dnc - y * dlam_c
            acc += dmc / (S(arm, k) * Sc(arm, k))
            J[arm].append(acc)

    dN = {0: [], 1: []}
    for l in (0, 1):
        for k in range(G):
            t = grid[k]
            dn = 1.0 if (x == t and delta == 1) else 0.0
            ds_a = S(a, k) - S(a, k - 1)
            val = a ** l * dn / (pt * Sc(a, k)) + a ** l * ds_a / pt
            for arm in (0, 1):
                val -= arm ** l * (1 + w[arm] * J[arm][k]) * (S(arm, k) - S(arm, k - 1))
            dN[l].append(val)

    def gamma(l, beta, k):
        t = grid[k]
        y = 1.0 if x >= t else 0.0
        e = math.exp(beta * a)
        val = a ** l * y * e / (pt * Sc(a, k)) - a ** l * S(a, k) * e / pt
        for arm in (0, 1):
            val += arm ** l * math.exp(beta * arm) * (1 + w[arm] * J[arm][k]) * S(arm, k)
        return val

    return {"dN0": dN[0], "dN1": dN[1], "j0": J[0], "j1": J[1], "gamma": gamma}


def fold_quantities(subjects, grid, beta):
    """Aggregates, ``U_m``, ``Lambda~_m`` increments and ``psi`` for one fold."""
    n = len(subjects)
    G = len(grid)
    s0 = [sum(sj["gamma"](0, beta, k) for sj in subjects) / n for k in range(G)]
    s1 = [sum(sj["gamma"](1, beta, k) for sj in subjects) / n for k in range(G)]
    abar = [s1[k] / s0[k] for k in range(G)]
    v = [abar[k] - abar[k] ** 2 for k in range(G)]
    dn0bar = [sum(sj["dN0"][k] for sj in subjects) / n for k in range(G)]
    u = sum(sum(sj["dN1"][k] - abar[k] * sj["dN0"][k] for k in range(G)) for sj in subjects) / n
    dlam = [dn0bar[k] / s0[k] for k in range(G)]
    psi = []
    for sj in subjects:
        first = sum(sj["dN1"][k] - sj["gamma"](1, beta, k) * dlam[k] for k in range(G))
        second = sum(abar[k] * (sj["dN0"][k] - sj["gamma"](0, beta, k) * dlam[k])
                     for k in range(G))
        psi.append(first - second)
    info = n * sum(v[k] * dn0bar[k] for k in range(G))
    return {"s0": s0, "s1": s1, "abar": abar, "u": u, "dlam": dlam, "psi": psi, "info": info}


def cross_fit(folds, grid, beta):
    """``U_cf``, per-fold ``Lambda~`` and ``sigma^2`` for a list of subject-term lists."""
    qs = [fold_quantities(f, grid, beta) for f in folds]
    u_cf = sum(q["u"] for q in qs) / len(qs)
    n = sum(len(f) for f in folds)
    num = sum(p * p for q in qs for p in q["psi"])
    den = sum(q["info"] for q in qs)
    lam = []
    for q in qs:
        acc, cum = 0.0, []
        for d in q["dlam"]:
            acc += d
            cum.append(acc)
        lam.append(cum)
    return {"u_cf": u_cf, "lambda": lam, "sigma2": n * num / den ** 2, "folds": qs}
