import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from gsnpmle.mixture import CountSample
from gsnpmle.rng import Rng
from gsnpmle.shape import (
    DeltaProfile,
    KappaConfig,
    cv_select_eta,
    dkw_eta,
    estimate_kappa,
    ks_distance,
    lp_atom_grid,
    min_ks_fit,
    nb_cdf_matrix,
    select_kappa,
    solve_min_ks,
)
from oracles import brute_force_min_ks, nb_cdf
from conftest import setting_i_counts

SMALL_GRID = KappaConfig(kappa_grid=[0.5, 1.0, 1.5, 2.0, 3.0, 4.0], atom_grid_size=60)


def test_ks_distance_examples():
    assert ks_distance([0.2, 0.7, 1.0], [0.2, 0.7, 1.0]) == 0.0
    assert ks_distance([0.2, 0.7, 1.0], [0.5, 0.6, 1.0]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        ks_distance([0.1], [0.1, 1.0])


def test_nb_cdf_matrix_matches_scipy():
    atoms = np.array([0.3, 1.0, 7.5])
    C = nb_cdf_matrix(2.5, atoms, 12)
    ref = np.stack([nb_cdf(2.5, a, np.arange(13)) for a in atoms], axis=1)
    assert np.max(np.abs(C - ref)) < 1e-13


def test_lp_atom_grid_bounds():
    s = CountSample([0, 1, 4, 10])
    g = lp_atom_grid(s, 2.0, 150)
    assert g.size == 150
    assert g[0] == pytest.approx(0.2)
    assert g[-1] == pytest.approx(80.0)
    assert np.all(np.diff(np.log(g)) == pytest.approx(np.log(g[1] / g[0])))


def test_min_ks_against_brute_force():
    counts = [0, 0, 1, 2, 4]
    w, delta = min_ks_fit(CountSample(counts), 2.0, [0.5, 2.0])
    w_ref, d_ref = brute_force_min_ks(counts, 2.0, [0.5, 2.0])
    assert delta <= d_ref + 1e-12
    assert delta >= d_ref - 2e-3
    assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0.0)


@pytest.mark.parametrize("seed", range(6))
def test_min_ks_against_highs(seed):
    gen = np.random.default_rng(seed)
    counts = gen.poisson(gen.gamma(1.5, 1.0, size=60))
    s = CountSample(counts)
    atoms = lp_atom_grid(s, 1.5, 40)
    fit = solve_min_ks(s, 1.5, atoms)
    C = nb_cdf_matrix(1.5, atoms, s.max_count)
    Fn = s.empirical_cdf
    M, ones = atoms.size, np.ones((C.shape[0], 1))
    A_ub = np.vstack([np.hstack([-ones, C]), np.hstack([-ones, -C])])
    ref = linprog(np.r_[1.0, np.zeros(M)], A_ub, np.r_[Fn, -Fn],
                  np.r_[0.0, np.ones(M)][None, :], [1.0], bounds=(0, None), method="highs")
    assert fit.delta == pytest.approx(ref.fun, abs=1e-9)
    assert fit.dual_residual <= 1e-9 and fit.primal_residual <= 1e-9
    # the sup is attained on the reported active set
    gaps = np.abs(C @ fit.weights - Fn)
    assert np.all(gaps[fit.active] >= fit.delta - 1e-8)


def test_representable_target_has_zero_distance():
    # a sample whose cdf matches a single NB closely is not enough; build the
    # empirical cdf from a one-point sample, which NB with tiny mean approximates
    s = CountSample([0, 0, 0])
    _, delta = min_ks_fit(s, 2.0, [1e6])
    assert delta < 1e-5


def test_delta_nonincreasing_when_atoms_added():
    gen = np.random.default_rng(3)
    s = CountSample(gen.poisson(gen.gamma(2.0, 1.0, size=200)))
    atoms = lp_atom_grid(s, 2.0, 80)
    d_sub = min_ks_fit(s, 2.0, atoms[::4])[1]
    d_full = min_ks_fit(s, 2.0, atoms)[1]
    assert d_full <= d_sub + 1e-12


def test_empty_atoms_rejected():
    with pytest.raises(ValueError):
        min_ks_fit(CountSample([1, 2]), 1.0, [])


def test_profile_monotone(setting_i_sample):
    profile = DeltaProfile(setting_i_sample, SMALL_GRID)
    values = profile.full()
    assert DeltaProfile.check_monotone(values)
    deltas = [d for _, d in values]
    assert all(b <= a + 1e-9 for a, b in zip(deltas, deltas[1:]))


def test_estimate_monotone_in_radius(setting_i_sample):
    profile = DeltaProfile(setting_i_sample, SMALL_GRID)
    ks = [estimate_kappa(setting_i_sample, e, SMALL_GRID, profile) for e in (0.005, 0.02, 0.05, 0.2)]
    assert ks == sorted(ks, reverse=True)


def test_estimate_agrees_with_linear_scan(setting_i_sample):
    profile = DeltaProfile(setting_i_sample, SMALL_GRID)
    values = profile.full()
    for eta in (0.01, 0.02, 0.04):
        scan = next((k for k, d in values if d <= eta), SMALL_GRID.kappa_grid[-1])
        assert estimate_kappa(setting_i_sample, eta, SMALL_GRID, profile) == scan


def test_large_radius_gives_smallest_shape(setting_i_sample):
    assert estimate_kappa(setting_i_sample, 1.0, SMALL_GRID) == SMALL_GRID.kappa_grid[0]


def test_unreachable_radius_falls_back(caplog):
    s = CountSample([0, 5, 5, 20, 40, 40, 41])
    cfg = KappaConfig(kappa_grid=[0.1, 0.2], atom_grid_size=10)
    res = select_kappa(s, 1e-9, cfg)
    assert res.kappa_hat == 0.2 and not res.within_radius
    assert "no shape on the grid" in caplog.text


def test_dkw_eta_examples():
    assert dkw_eta(math.e, 1.0) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert dkw_eta(1000, 0.75) == pytest.approx(0.75 * math.sqrt(math.log(1000) / 1000), rel=1e-14)
    assert dkw_eta(1000, 0.75) == pytest.approx(0.0623347, abs=1e-6)
    with pytest.raises(ValueError):
        dkw_eta(1000, 1.0 / math.sqrt(2.0))
    with pytest.raises(ValueError):
        dkw_eta(1.0, 1.0)


def test_dkw_calibration():
    # the sup distance between the empirical and true cdf stays inside the radius
    gen = np.random.default_rng(11)
    n, C = 1000, 0.75
    eta = dkw_eta(n, C)
    hits = 0
    for _ in range(200):
        theta = gen.gamma(2.0, 1.0 / 2.0, size=n)
        x = gen.poisson(theta)
        m = np.arange(x.max() + 1)
        Fn = np.searchsorted(np.sort(x), m, side="right") / n
        hits += ks_distance(Fn, nb_cdf(2.0, 2.0, m)) <= eta
    assert hits / 200 >= 0.95


def test_cv_deterministic_and_single_candidate():
    _, s = setting_i_counts(300, 5)
    cfg = KappaConfig(kappa_grid=[0.5, 1.0, 2.0, 4.0], atom_grid_size=40, cv_eta_grid=[0.01, 0.05, 0.1])
    a = cv_select_eta(s, cfg, Rng(1, 2))
    b = cv_select_eta(s, cfg, Rng(1, 2))
    assert a == b and a in cfg.cv_eta_grid
    one = KappaConfig(kappa_grid=[1.0], cv_eta_grid=[0.03])
    assert cv_select_eta(s, one, Rng(0)) == 0.03


def test_select_kappa_rules(setting_i_sample):
    res = select_kappa(setting_i_sample, "dkw:0.75", SMALL_GRID)
    assert res.eta_rule == "dkw" and res.eta == pytest.approx(dkw_eta(1000, 0.75))
    assert len(res.profile) == len(SMALL_GRID.kappa_grid)
    fixed = select_kappa(setting_i_sample, 0.05, SMALL_GRID, full_profile=False)
    assert fixed.eta_rule == "fixed"
    assert fixed.to_dict()["kappa_hat"] == fixed.kappa_hat


def test_config_validation():
    with pytest.raises(ValueError):
        KappaConfig(kappa_grid=[1.0, 0.5])
    with pytest.raises(ValueError):
        KappaConfig(cv_folds=1)
    with pytest.raises(ValueError):
        KappaConfig(cv_eta_grid=[])


@given(counts=st.lists(st.integers(0, 12), min_size=3, max_size=30))
@settings(max_examples=25, deadline=None)
def test_min_ks_property(counts):
    s = CountSample(counts)
    atoms = lp_atom_grid(s, 1.0, 20)
    w, delta = min_ks_fit(s, 1.0, atoms)
    C = nb_cdf_matrix(1.0, atoms, s.max_count)
    assert 0.0 <= delta <= 1.0
    assert ks_distance(C @ w, s.empirical_cdf) == pytest.approx(delta, abs=1e-12)
    # any single atom does no better than the optimum
    single = np.abs(C - s.empirical_cdf[:, None]).max(axis=0)
    assert delta <= single.min() + 1e-9
