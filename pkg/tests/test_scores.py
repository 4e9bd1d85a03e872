import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import naive_oracle
from msm_aipw.data import Dataset, SurvivalRecord
from msm_aipw.errors import DataError
from msm_aipw.nuisance import (ConstantPropensityModel, CoxWorkingModel, KnownSurvivalModel,
                               NuisanceTriple, UnitSurvivalModel, identity_nuisance)
from msm_aipw.scores import (StepFunction, TimeGrid, aggregate_scores, build_time_grid,
                             censoring_martingale_increments, compute_dataset_scores,
                             compute_scores, compute_subject_scores)

TOL = dict(rtol=1e-12, atol=1e-12)


def oracle_subjects(ds, nu, grid, index=None):
    index = range(ds.n) if index is None else index
    g = list(grid.times)

    def pi(z):
        return float(nu.pi_hat(np.array([z]))[0])

    def s(t, arm, z):
        return float(nu.s_hat(np.array([t]), arm, np.array([z]))[0, 0])

    def sc(t, arm, z):
        return float(nu.sc_hat(np.array([t]), arm, np.array([z]))[0, 0])

    return [naive_oracle.subject_terms(float(ds.x[i]), int(ds.delta[i]), int(ds.a[i]),
                                       list(ds.z[i]), pi, s, sc, g) for i in index]


class TestBruteForce:

    def test_grid_is_small(self, tiny, tiny_nuisance):
        grid = build_time_grid(tiny, tiny_nuisance)
        npt.assert_array_equal(grid.times, [0.4, 0.7, 1.1, 2.5, 3.0])

    def test_increments(self, tiny, tiny_nuisance):
        grid = build_time_grid(tiny, tiny_nuisance)
        sc = compute_dataset_scores(tiny, tiny_nuisance, grid)
        ref = oracle_subjects(tiny, tiny_nuisance, grid)
        for i, r in enumerate(ref):
            npt.assert_allclose(sc.dN0[i], r["dN0"], **TOL)
            npt.assert_allclose(sc.dN1[i], r["dN1"], **TOL)
            npt.assert_allclose(sc.j0[i], r["j0"], **TOL)
            npt.assert_allclose(sc.j1[i], r["j1"], **TOL)

    @pytest.mark.parametrize("beta", [-1.3, 0.0, 0.45])
    def test_risk_terms(self, tiny, tiny_nuisance, beta):
        grid = build_time_grid(tiny, tiny_nuisance)
        sc = compute_dataset_scores(tiny, tiny_nuisance, grid)
        ref = oracle_subjects(tiny, tiny_nuisance, grid)
        for i, r in enumerate(ref):
            npt.assert_allclose(sc.gamma0(beta)[i], [r["gamma"](0, beta, k) for k in range(5)], **TOL)
            npt.assert_allclose(sc.gamma1(beta)[i], [r["gamma"](1, beta, k) for k in range(5)], **TOL)

    def test_aggregates(self, tiny, tiny_nuisance):
        grid = build_time_grid(tiny, tiny_nuisance)
        agg = aggregate_scores(compute_dataset_scores(tiny, tiny_nuisance, grid), 0.3)
        ref = naive_oracle.fold_quantities(oracle_subjects(tiny, tiny_nuisance, grid), grid.times, 0.3)
        npt.assert_allclose(agg.s0, ref["s0"], **TOL)
        npt.assert_allclose(agg.s1, ref["s1"], **TOL)
        npt.assert_allclose(agg.abar, ref["abar"], **TOL)

    def test_subject_list_matches_batch(self, tiny, tiny_nuisance):
        grid = build_time_grid(tiny, tiny_nuisance)
        batch = compute_dataset_scores(tiny, tiny_nuisance, grid)
        subj = [compute_subject_scores(r, tiny_nuisance, grid) for r in tiny.records]
        npt.assert_allclose(aggregate_scores(subj, -0.2).abar, aggregate_scores(batch, -0.2).abar,
                            **TOL)

    def test_blocked_scores_match_single_block(self, tiny, tiny_nuisance):
        grid = build_time_grid(tiny, tiny_nuisance)
        one = compute_dataset_scores(tiny, tiny_nuisance, grid)
        blocked = compute_dataset_scores(tiny, tiny_nuisance, grid, block_cells=len(grid) * 2)
        for f in ("dN0", "dN1", "P0", "Q", "j0", "j1"):
            npt.assert_array_equal(getattr(one, f), getattr(blocked, f))


class TestIdentityCollapse:

    def test_increments_are_weighted_counting_process(self, tiny):
        nu = identity_nuisance(0.5)
        grid = build_time_grid(tiny, nu)
        sc = compute_dataset_scores(tiny, nu, grid)
        dn = (tiny.x[:, None] == grid.times[None, :]) & (tiny.delta[:, None] == 1)
        npt.assert_allclose(sc.dN0, dn / 0.5, **TOL)
        npt.assert_allclose(sc.dN1, tiny.a[:, None] * dn / 0.5, **TOL)
        # J reduces to the censoring counting process; dS = 0 kills its contribution
        dnc = (tiny.x[:, None] == grid.times[None, :]) & (tiny.delta[:, None] == 0)
        npt.assert_array_equal(sc.j0, np.cumsum(dnc, axis=1))

    def test_treated_event_subject(self):
        nu = identity_nuisance(0.5)
        grid = TimeGrid(np.array([0.5, 1.0, 1.5]))
        s = compute_subject_scores(SurvivalRecord(1.0, 1, 1, ()), nu, grid)
        npt.assert_allclose(s.dN1, [0, 2, 0])
        # with unit survival curves the constants cancel at c = 0.5
        npt.assert_allclose(s.gamma0(0.0), [2, 2, 0], **TOL)

    def test_control_subject_has_no_arm1_ipw_part(self):
        nu = identity_nuisance(0.5)
        grid = TimeGrid(np.array([0.5, 1.0]))
        s = compute_subject_scores(SurvivalRecord(0.5, 1, 0, ()), nu, grid)
        npt.assert_array_equal(s.dN1, 0.0)
        # Gamma^(1) keeps only the a = 1 augmentation summand, e^beta * 1
        npt.assert_allclose(s.gamma1(0.7), np.exp(0.7))


class TestCensoringMartingale:

    def test_unit_censoring_survival(self):
        nu = identity_nuisance(0.5)
        grid = TimeGrid(np.array([0.2, 0.4, 0.9]))
        npt.assert_array_equal(censoring_martingale_increments(SurvivalRecord(0.4, 0, 1, ()), nu, 0, grid),
                               [0, 1, 0])

    def test_event_subject_is_minus_compensator(self):
        cens = CoxWorkingModel(np.zeros(0), np.array([0.2, 0.4]), np.array([0.1, 0.3]), "censoring")
        nu = NuisanceTriple(ConstantPropensityModel(0.5), UnitSurvivalModel(), cens)
        grid = TimeGrid(np.array([0.2, 0.4, 0.9]))
        inc = censoring_martingale_increments(SurvivalRecord(0.4, 1, 1, ()), nu, 1, grid)
        npt.assert_allclose(inc, [-0.1, -0.3, 0.0], rtol=1e-12)

    def test_censored_at_jump(self):
        cens = CoxWorkingModel(np.zeros(0), np.array([0.3]), np.array([0.1]), "censoring")
        nu = NuisanceTriple(ConstantPropensityModel(0.5), UnitSurvivalModel(), cens)
        grid = TimeGrid(np.array([0.3, 0.6]))
        inc = censoring_martingale_increments(SurvivalRecord(0.3, 0, 0, ()), nu, 0, grid)
        npt.assert_allclose(inc, [0.9, 0.0], rtol=1e-12)


class TestTimeGrid:

    def test_union_with_baseline_jumps(self):
        ds = Dataset([0.3, 0.7], [1, 1], [0, 1], np.zeros((2, 0)), tau=1.0)
        surv = CoxWorkingModel(np.zeros(0), np.array([0.3, 0.5]), np.array([0.2, 0.2]), "event")
        nu = NuisanceTriple(ConstantPropensityModel(0.5), surv, UnitSurvivalModel())
        npt.assert_array_equal(build_time_grid(ds, nu).times, [0.3, 0.5, 0.7])

    def test_identity_with_censoring(self):
        ds = Dataset([0.3, 0.4, 0.7, 0.7], [1, 0, 1, 1], [0, 1, 1, 0], np.zeros((4, 0)), tau=1.0)
        npt.assert_array_equal(build_time_grid(ds, identity_nuisance()).times, [0.3, 0.4, 0.7])

    def test_rejects_unsorted(self):
        with pytest.raises(DataError):
            TimeGrid(np.array([0.5, 0.2]))


class TestStepFunction:

    def test_zero_before_first_jump(self):
        f = StepFunction(np.array([1.0, 2.0]), np.array([0.5, 0.8]))
        npt.assert_allclose(f([0.0, 0.99, 1.0, 1.5, 2.0, 9.0]), [0, 0, 0.5, 0.5, 0.8, 0.8])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 2.0), st.booleans(), st.booleans(),
                          st.floats(-2, 2)), min_size=2, max_size=12),
       st.floats(-3, 3))
def test_scores_finite_and_j_frozen_after_exit(rows, beta):
    x = np.round([r[0] for r in rows], 3)
    z = np.array([[r[3]] for r in rows])
    a = np.array([int(r[2]) for r in rows])
    if a.min() == a.max():
        a[0] = 1 - a[0]
    ds = Dataset(x, [int(r[1]) for r in rows], a, z, tau=2.0)
    surv = KnownSurvivalModel(lambda g, arm, zz: np.exp(-np.outer(np.exp(0.5 * arm + zz[:, 0]), g)))
    nu = NuisanceTriple(ConstantPropensityModel(0.3), surv, surv, clip_ps=(0.1, 0.9))
    grid = build_time_grid(ds, nu)
    sc = compute_scores(ds.x, ds.delta, ds.a, ds.z, nu, grid)
    assert np.all(np.isfinite(sc.gamma0(beta))) and np.all(np.isfinite(sc.dN0))
    # J is frozen after the subject leaves the risk set
    for i in range(ds.n):
        k = np.searchsorted(grid.times, ds.x[i], side="right")
        last = sc.j0[i, k - 1] if k else 0.0
        npt.assert_array_equal(sc.j0[i, k:], last)


def test_all_treated_risk_terms_differ_by_control_augmentation(tiny, tiny_nuisance):
    ds = Dataset(tiny.x, tiny.delta, np.ones(5), tiny.z, tiny.tau, require_both_arms=False)
    grid = build_time_grid(ds, tiny_nuisance)
    agg = aggregate_scores(compute_dataset_scores(ds, tiny_nuisance, grid), 0.4)
    npt.assert_allclose(agg.s0 - agg.s1, tiny_nuisance.s_hat(grid.times, 0, ds.z).mean(axis=0), **TOL)
