import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammainc

from gsnpmle import simlab
from gsnpmle.mixture import CountSample, GammaMixtureModel, marginal_pmf, posterior_mean
from gsnpmle.rng import Rng
from gsnpmle.shape import KappaConfig
from gsnpmle.simlab import (
    GammaMixturePrior,
    IGMixturePrior,
    LognormalPrior,
    ScenarioSpec,
    SpecError,
    StudyResult,
    hellinger_sq,
    prediction_rmse,
    prior_from_dict,
    rate_experiment,
    run_coverage_study,
    sample_scenario,
    tv_prior,
    worker_count,
    write_aggregate_csv,
    write_replications_csv,
    wtv,
)

SETTING_I = GammaMixturePrior(((0.5, 2.0, 2.0), (0.5, 2.0, 4.0)))


def _random_model(gen, kappa=2.0):
    atoms = np.sort(gen.uniform(0.5, 6.0, 2))
    w = gen.dirichlet([1.0, 1.0])
    return GammaMixtureModel.from_components(kappa, atoms, w)


def test_sampler_means():
    one = ScenarioSpec(GammaMixturePrior(((1.0, 2.0, 2.0),)), n=100_000)
    th, _ = sample_scenario(one, Rng(1, 0))
    assert abs(th.mean() - 1.0) <= 0.02
    _, counts = sample_scenario(ScenarioSpec(SETTING_I, n=100_000), Rng(2, 0))
    assert abs(counts.counts.mean() - 0.75) <= 0.02
    th, _ = sample_scenario(ScenarioSpec(LognormalPrior(0.0, 1.0), n=100_000), Rng(3, 0))
    se = math.sqrt((math.e - 1) * math.e / 100_000)
    assert abs(th.mean() - math.exp(0.5)) <= 3 * se
    ig = IGMixturePrior(((1.0, 2.0, 3.0),))
    th, _ = sample_scenario(ScenarioSpec(ig, n=100_000), Rng(4, 0))
    assert abs(th.mean() - 2.0) <= 3 * math.sqrt(2.0 ** 3 / 3.0 / 100_000)


def test_sampling_deterministic():
    spec = ScenarioSpec(SETTING_I, n=500)
    a = sample_scenario(spec, Rng(9, 4))
    b = sample_scenario(spec, Rng(9, 4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].counts, b[1].counts)


def test_prior_marginals_match_quadrature():
    # the lognormal marginal against an independent scipy quadrature
    prior = LognormalPrior(0.0, 1.0)
    from scipy.integrate import quad

    for x in (0, 1, 4):
        ref = quad(lambda t: stats.poisson.pmf(x, t) * stats.lognorm.pdf(t, 1.0), 0, np.inf, limit=200)[0]
        assert prior.marginal(x) == pytest.approx(ref, rel=1e-7)
    xs = np.arange(40)
    assert SETTING_I.marginal(xs).sum() == pytest.approx(1.0, abs=1e-10)


def test_tv_identical_and_disjoint():
    assert tv_prior(SETTING_I, SETTING_I) <= 1e-5
    a = GammaMixturePrior(((1.0, 400.0, 400.0),))
    b = GammaMixturePrior(((1.0, 400.0, 40.0),))
    assert tv_prior(a, b) > 1 - 1e-5


def test_tv_gamma_pair_riemann_oracle():
    g1 = GammaMixturePrior(((1.0, 2.0, 2.0),))
    g2 = GammaMixturePrior(((1.0, 2.0, 4.0),))
    N, top = 10_000_000, 40.0
    h = top / N
    t = (np.arange(N) + 0.5) * h
    ref = 0.5 * h * np.abs(stats.gamma.pdf(t, 2.0, scale=0.5) - stats.gamma.pdf(t, 2.0, scale=0.25)).sum()
    assert tv_prior(g1, g2) == pytest.approx(ref, abs=1e-4)
    # closed form: same shape, crossing at a ln(r2/r1)/(r2 - r1)
    cross = 2.0 * math.log(2.0) / 2.0
    assert tv_prior(g1, g2) == pytest.approx(gammainc(2.0, 4 * cross) - gammainc(2.0, 2 * cross), abs=1e-6)


def test_tv_symmetry_and_triangle():
    gen = np.random.default_rng(8)
    for _ in range(5):
        a, b, c = (_random_model(gen) for _ in range(3))
        ab, bc, ac = tv_prior(a, b), tv_prior(b, c), tv_prior(a, c)
        assert tv_prior(b, a) == pytest.approx(ab, abs=1e-6)
        assert ac <= ab + bc + 1e-4


def test_tv_accepts_callables():
    d1 = lambda t: stats.expon.pdf(t)
    d2 = lambda t: stats.expon.pdf(t, scale=2.0)
    # crossing at 2 ln 2; TV = F2(c) - F1(c) in magnitude
    c = 2.0 * math.log(2.0)
    ref = abs(stats.expon.cdf(c) - stats.expon.cdf(c, scale=2.0))
    assert tv_prior(d1, d2) == pytest.approx(ref, abs=1e-5)


def test_wtv_identical():
    m = GammaMixtureModel.from_components(2.0, [2.0, 4.0], [0.5, 0.5])
    assert wtv(m, m) <= 1e-4


def test_wtv_single_atom_oracle():
    kappa, l1, l2 = 2.0, 1.0, 1.5
    m1 = GammaMixtureModel.single(kappa, l1)
    m2 = GammaMixtureModel.single(kappa, l2)
    xs = np.arange(400)
    f2 = stats.nbinom.pmf(xs, kappa, l2 / (l2 + 1.0))
    a = xs + kappa
    r1, r2 = l1 + 1.0, l2 + 1.0
    cross = a * math.log(r2 / r1) / (r2 - r1)
    per_x = np.abs(gammainc(a, r2 * cross) - gammainc(a, r1 * cross))
    ref = float(np.sum(per_x * f2))
    assert wtv(m1, m2) == pytest.approx(ref, abs=1e-4)


def test_wtv_bound():
    gen = np.random.default_rng(21)
    for _ in range(10):
        a, b = _random_model(gen), _random_model(gen)
        xs = np.arange(300)
        tv_marg = 0.5 * np.abs(marginal_pmf(a, xs) - marginal_pmf(b, xs)).sum()
        assert wtv(a, b) <= tv_prior(a, b) + tv_marg + 1e-4


def test_wtv_rejects_infinity_atom():
    m = GammaMixtureModel.from_components(2.0, [1.0], [0.5], mass_at_infinity=0.5)
    with pytest.raises(ValueError):
        wtv(m, m)


def test_hellinger_examples():
    m = GammaMixtureModel.from_components(2.0, [2.0, 4.0], [0.5, 0.5])
    assert hellinger_sq(m, m) == 0.0
    p0 = lambda xs: (np.asarray(xs) == 0).astype(float)
    p1 = lambda xs: (np.asarray(xs) == 1).astype(float)
    assert hellinger_sq(p0, p1) == pytest.approx(1.0)
    a, b = GammaMixtureModel.single(2.0, 1.0), GammaMixtureModel.single(3.0, 0.7)
    xs = np.arange(10_000)
    ref = 0.5 * np.sum((np.sqrt(stats.nbinom.pmf(xs, 2.0, 0.5)) - np.sqrt(stats.nbinom.pmf(xs, 3.0, 0.7 / 1.7))) ** 2)
    assert hellinger_sq(a, b) == pytest.approx(ref, abs=1e-12)
    assert hellinger_sq(b, a) == pytest.approx(ref, abs=1e-12)


def test_prediction_rmse():
    s = CountSample([0, 1, 3, 7])
    m = GammaMixtureModel.single(2.0, 1.0)
    assert prediction_rmse(s, posterior_mean(m, s.counts), m) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        prediction_rmse(s, [1, 2], m)


def test_posterior_mean_beats_constant_prediction():
    from gsnpmle.npmle import fit_npmle

    rng = Rng(31, 0)
    theta = SETTING_I.sample(2000, rng)
    train = CountSample(rng.poisson(theta))
    future = rng.poisson(theta)
    model, _ = fit_npmle(train, 2.0)
    baseline = float(np.sqrt(np.mean((train.counts.mean() - future) ** 2)))
    assert baseline >= prediction_rmse(train, future, model)


def test_spec_round_trip_and_errors():
    text = json.dumps({
        "prior": {"lognormal": {"mu": 0.0, "sigma": 1.0}},
        "n": 100,
        "reps": 2,
        "kappa_rule": {"neighborhood": {"eta": "dkw:0.75", "kappa_grid": [0.5, 1.0]}},
    })
    spec = ScenarioSpec.from_json(text)
    assert ScenarioSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    cases = {
        "n": {"prior": SETTING_I.to_dict(), "n": 0},
        "beta": {"prior": SETTING_I.to_dict(), "n": 5, "beta": 1.0},
        "bogus": {"prior": SETTING_I.to_dict(), "n": 5, "bogus": 1},
        "prior.components": {"prior": {"gamma_mixture": {"components": [[0.6, 2, 2]]}}, "n": 5},
        "kappa_rule.fixed": {"prior": SETTING_I.to_dict(), "n": 5, "kappa_rule": {"fixed": -1}},
        "prior": {"prior": {"weibull": {}}, "n": 5},
        "metrics": {"prior": SETTING_I.to_dict(), "n": 5, "metrics": ["kl"]},
    }
    for name, data in cases.items():
        with pytest.raises(SpecError) as info:
            ScenarioSpec.from_dict(data)
        assert info.value.field == name
    with pytest.raises(SpecError):
        ScenarioSpec.from_json("{not json")
    assert prior_from_dict(SETTING_I.to_dict()) == SETTING_I


def test_coverage_study_deterministic(tmp_path):
    spec = ScenarioSpec(SETTING_I, n=300, reps=2, mc_draws=20_000, base_seed=5, metrics=("hellinger",))
    a = run_coverage_study(spec, workers=1)
    b = run_coverage_study(spec, workers=1)
    assert a.replications == b.replications
    for r in a.replications:
        assert 0.0 <= r.coverage_opt <= 1.0 and 0.0 <= r.coverage_garwood <= 1.0
        assert r.length_opt >= 0.0 and r.length_garwood >= 0.0
        assert r.hellinger_sq is not None and r.tv_prior is None
    write_replications_csv(tmp_path / "a.csv", a)
    write_replications_csv(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    write_aggregate_csv(tmp_path / "agg.csv", a)
    head = (tmp_path / "agg.csv").read_text().splitlines()[0].split(",")
    assert head[:6] == ["statistic", "coverage_opt", "length_opt", "coverage_garwood", "length_garwood", "kappa_hat"]


def test_half_level_sanity():
    spec = ScenarioSpec(SETTING_I, n=1000, beta=0.5, reps=4, mc_draws=50_000, base_seed=17)
    study = run_coverage_study(spec, workers=1)
    assert abs(study.column("coverage_opt").mean() - 0.5) <= 0.03


def test_neighborhood_rule_runs():
    cfg = KappaConfig(kappa_grid=[0.5, 1.0, 2.0, 4.0], atom_grid_size=40, eta="dkw:0.75")
    spec = ScenarioSpec(LognormalPrior(0.0, 1.0), n=200, reps=1, mc_draws=10_000, kappa_rule=("neighborhood", cfg))
    study = run_coverage_study(spec, workers=1)
    assert study.n_failed == 0
    assert study.replications[0].kappa_hat in cfg.kappa_grid


def test_failures_are_recorded(monkeypatch, tmp_path):
    real = simlab.fit_npmle

    def flaky(counts, kappa, config=None):
        if counts.n == 50 and counts.counts.sum() % 2 == 0:
            raise RuntimeError("boom")
        return real(counts, kappa, config)

    monkeypatch.setattr(simlab, "fit_npmle", flaky)
    spec = ScenarioSpec(SETTING_I, n=50, reps=6, mc_draws=2_000)
    study = run_coverage_study(spec, workers=1)
    assert study.n_failed + len(study.replications) == 6
    assert study.n_failed > 0
    assert all("boom" in msg for _, msg in study.failures)
    write_replications_csv(tmp_path / "r.csv", study)
    text = (tmp_path / "r.csv").read_text()
    assert text.count("RuntimeError") == study.n_failed
    assert study.aggregate()["coverage_opt"]["mean"] >= 0.0


def test_rate_experiment_smoke():
    res = rate_experiment(SETTING_I, 2.0, [128, 512], 3, Rng(7, 100))
    assert len(res.records) == 6
    assert res.mean_tv[1] < res.mean_tv[0]
    assert res.slope < 0.0
    with pytest.raises(TypeError):
        rate_experiment(LognormalPrior(0.0, 1.0), 2.0, [128, 256], 1, Rng(0))


def test_worker_count(monkeypatch):
    monkeypatch.delenv("GSNPMLE_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("GSNPMLE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("GSNPMLE_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.setenv("GSNPMLE_THREADS", "x")
    with pytest.raises(ValueError):
        worker_count()


def test_parallel_matches_serial():
    spec = ScenarioSpec(SETTING_I, n=200, reps=2, mc_draws=5_000, base_seed=3)
    assert run_coverage_study(spec, workers=2).replications == run_coverage_study(spec, workers=1).replications


def test_aggregate_statistics():
    study = StudyResult([simlab.ReplicationResult(i, 0.9 + 0.01 * i, 1.0, 1.0, 2.0, 2.0) for i in range(3)])
    agg = study.aggregate()
    assert agg["coverage_opt"]["mean"] == pytest.approx(0.91)
    assert agg["coverage_opt"]["sd"] == pytest.approx(0.01)


def test_tv_cdf_path_matches_quadrature_path():
    ln = LognormalPrior(0.0, 1.0)
    # plain callables carry no cdf and force piecewise quadrature
    exact = tv_prior(ln, SETTING_I)
    quad = tv_prior(lambda t: ln.density(t), lambda t: SETTING_I.density(t), upper=ln.upper(1e-8))
    assert exact == pytest.approx(quad, abs=1e-5)
