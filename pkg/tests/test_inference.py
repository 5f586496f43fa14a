"""Optimizer, standard errors, intervals, validity screening and post-fit summaries."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idsfit import (FitResult, ModelSpec, SurveyDataset, estimate_site_abundance, fit, predict_density,
                    simulate, validity_filter, wald_intervals)
from idsfit.inference import eb_mean, fd_gradient, fd_hessian, site_abundance_interval
from idsfit.model import JointModel

from conftest import BREAKS, ids1_scenario
from oracles import brute_posterior_mean


@pytest.fixture(scope="module")
def ids1_fit():
    scn = ids1_scenario(n_ds=120, n_pc=300, sigma_pc=70.0)
    data = simulate(scn, 3)
    spec = scn.model_spec()
    return scn, data, fit(spec, data)


def _rosen(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def test_fd_gradient_richardson():
    x = np.array([0.3, -0.7])
    exact = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    g = fd_gradient(_rosen, x)
    np.testing.assert_allclose(g, exact, rtol=1e-8)
    # a Richardson-extrapolated estimate from coarser steps agrees as well
    g1 = fd_gradient(_rosen, x, h=1e-3)
    g2 = fd_gradient(_rosen, x, h=5e-4)
    np.testing.assert_allclose((4 * g2 - g1) / 3, exact, rtol=1e-9)


def test_fd_hessian_matches_analytic():
    x = np.array([0.3, -0.7])
    exact = np.array([[2 - 400 * (x[1] - 3 * x[0] ** 2), -400 * x[0]], [-400 * x[0], 200.0]])
    H = fd_hessian(_rosen, x)
    np.testing.assert_allclose(H, exact, rtol=1e-5)
    np.testing.assert_allclose(H, H.T, atol=1e-8 * np.abs(H).max())


def test_fit_recovers_truth(ids1_fit):
    scn, data, res = ids1_fit
    _, truth = scn.truth()
    assert res.converged and res.valid
    assert np.all(np.abs(res.mle - truth) < 3 * res.se)
    assert np.max(np.abs(res.gradient)) <= 1e-5
    np.testing.assert_allclose(res.nll, JointModel(res.spec, data).nll(res.mle), rtol=1e-14)


def test_mle_is_fixed_point(ids1_fit):
    _, data, res = ids1_fit
    again = fit(res.spec, data, start=res.mle, multistart=False)
    np.testing.assert_allclose(again.mle, res.mle, atol=1e-5)
    assert again.nll <= res.nll + 1e-8


def test_hessian_symmetric_and_positive(ids1_fit):
    _, _, res = ids1_fit
    H = res.hessian
    np.testing.assert_allclose(H, H.T, atol=1e-6 * np.abs(H).max())
    assert np.all(np.linalg.eigvalsh(0.5 * (H + H.T)) > 0)
    np.testing.assert_allclose(res.se, np.sqrt(np.diag(res.vcov)), rtol=1e-12)


def test_density_unit_reparameterization(ids1_fit):
    _, data, res = ids1_fit
    per_km2 = fit(res.spec.with_(density_area_m2=1e6), data)
    np.testing.assert_allclose(per_km2.mle[0], res.mle[0] + np.log(100.0), atol=1e-5)
    np.testing.assert_allclose(per_km2.mle[1:], res.mle[1:], atol=1e-5)
    np.testing.assert_allclose(per_km2.nll, res.nll, rtol=1e-10)
    np.testing.assert_allclose(per_km2.se, res.se, rtol=1e-3)


def test_fit_json_roundtrip(ids1_fit):
    _, _, res = ids1_fit
    back = FitResult.from_json(res.to_json())
    assert back.names == res.names
    assert np.array_equal(back.mle, res.mle)
    assert np.array_equal(back.vcov, res.vcov)
    assert back.spec == res.spec
    assert back.to_json() == res.to_json()


def test_bad_start_raises(ids1_fit):
    _, data, res = ids1_fit
    with pytest.raises(ValueError, match="bad start"):
        fit(res.spec, data, start=[800.0, 4.6, 4.2])


def test_no_detections_flagged_at_boundary():
    ds = SurveyDataset("ds", [f"d{i}" for i in range(20)], np.zeros((20, 4)), 5.0, 200.0, breaks=BREAKS)
    pc = SurveyDataset("pc", [f"p{i}" for i in range(20)], np.zeros(20), 5.0, 200.0)
    res = fit(ModelSpec(breaks=BREAKS), [ds, pc])
    assert res.validity.startswith("INVALID")
    assert not res.valid


def test_wald_examples():
    iv = wald_intervals((np.array([0.0, 1.0]), np.array([1.0, 0.5])), 0.95)
    np.testing.assert_allclose(iv.upper, [1.959963984540054, 1.979981992270027], rtol=1e-14)
    np.testing.assert_allclose(iv.lower, [-1.959963984540054, 0.020018007729973], rtol=1e-12)
    assert iv.validity == "VALID"
    np.testing.assert_allclose(iv.natural()[0], np.exp([0.0, 1.0]))
    assert wald_intervals(([1.0], [0.0])).validity == "INVALID(zero_width)"
    with pytest.raises(ValueError):
        wald_intervals(([1.0], [np.nan]))


def _fake_fit(ids1_fit, **changes):
    _, _, res = ids1_fit
    fields = dict(spec=res.spec, layout=res.layout, mle=res.mle.copy(), se=res.se.copy(), vcov=res.vcov,
                  nll=res.nll, converged=True, n_evals=0)
    fields.update(changes)
    return FitResult(**fields)


def test_validity_reasons(ids1_fit):
    _, _, res = ids1_fit
    truth = dict(zip(res.names, [0.0, np.log(100.0), np.log(70.0)]))
    assert validity_filter(_fake_fit(ids1_fit), truth) == "VALID"
    assert validity_filter(_fake_fit(ids1_fit, converged=False)) == "INVALID(not_converged)"
    assert validity_filter(_fake_fit(ids1_fit, mle=np.array([-30.0, 4.6, 4.2]))) == "INVALID(boundary)"
    assert validity_filter(_fake_fit(ids1_fit, se=np.array([np.nan, 0.1, 0.1]))) == "INVALID(se_nonfinite)"
    assert validity_filter(_fake_fit(ids1_fit, se=np.array([5.5, 0.1, 0.1]))) == "INVALID(se_large)"
    exploded = _fake_fit(ids1_fit, mle=np.array([np.log(11.0), 4.6, 4.2]))
    assert validity_filter(exploded) == "VALID"
    assert validity_filter(exploded, truth) == "INVALID(mle_explosion)"


@settings(max_examples=100, deadline=None)
@given(y=st.integers(0, 25), lam=st.floats(0.01, 30.0), q=st.floats(0.001, 0.999))
def test_eb_mean_pc_brute_force(y, lam, q):
    np.testing.assert_allclose(eb_mean(y, lam, q, "pc"), brute_posterior_mean(y, lam, q, "pc"), rtol=1e-8)


@settings(max_examples=100, deadline=None)
@given(y=st.integers(0, 1), lam=st.floats(0.01, 30.0), q=st.floats(0.001, 0.999))
def test_eb_mean_dnd_brute_force(y, lam, q):
    np.testing.assert_allclose(eb_mean(y, lam, q, "dnd"), brute_posterior_mean(y, lam, q, "dnd"), rtol=1e-8)


def test_site_abundance_end_to_end(ids1_fit):
    _, data, res = ids1_fit
    pc = data["pc"]
    est = estimate_site_abundance(res, pc)
    assert len(est) == pc.n_sites
    assert all(e.expected_N >= y for e, y in zip(est, pc.y))
    lo, hi = site_abundance_interval(res, pc)
    means = np.array([e.expected_N for e in est])
    assert np.all(lo <= means) and np.all(means <= hi)


def test_site_abundance_rejects_unlimited(ids1_fit):
    _, _, res = ids1_fit
    pc = SurveyDataset("pc", ["u"], [1], 5.0, np.nan)
    with pytest.raises(ValueError, match="finite truncation"):
        estimate_site_abundance(res, pc)


def test_predict_intercept_only_sum(ids1_fit):
    _, _, res = ids1_fit
    pred = predict_density(res, {"cell": np.zeros(100)}, cell_area=2.5)
    per_cell = np.exp(res.mle[0]) * 100 * 2.5
    np.testing.assert_allclose(pred.abundance, per_cell, rtol=1e-14)
    assert pred.total == 100 * pred.abundance[0]


def test_predict_delta_method_matches_draws():
    rng = np.random.default_rng(5)
    spec = ModelSpec(density="~ habitat", breaks=BREAKS)
    from idsfit.model import ParameterLayout
    layout = ParameterLayout.from_spec(spec, ["ds"])
    A = rng.normal(scale=0.05, size=(3, 3))
    vcov = A @ A.T + 0.002 * np.eye(3)
    res = FitResult(spec=spec, layout=layout, mle=np.array([0.2, 0.5, 4.6]), se=np.sqrt(np.diag(vcov)),
                    vcov=vcov, nll=0.0, converged=True, n_evals=0)
    h = np.array([-1.0, 0.0, 1.5])
    pred = predict_density(res, {"habitat": h})
    draws = rng.multivariate_normal(res.mle, vcov, size=100_000)
    sims = np.exp(draws[:, :1] + draws[:, 1:2] * h) * 100
    np.testing.assert_allclose(pred.se, sims.std(axis=0), rtol=0.05)
    np.testing.assert_allclose(pred.total_se, sims.sum(axis=1).std(), rtol=0.05)


def test_gradient_step_halving_agrees(ids1_fit):
    _, data, res = ids1_fit
    f = JointModel(res.spec, data).nll
    x = res.mle + np.array([0.05, -0.03, 0.04])  # off the optimum so the gradient is not ~0
    h = np.finfo(float).eps ** (1 / 3) * np.maximum(np.abs(x), 1)
    g1, g2 = fd_gradient(f, x, h), fd_gradient(f, x, h / 2)
    np.testing.assert_allclose(g2, g1, rtol=1e-4)


def test_hessian_asymmetry_small(ids1_fit):
    _, _, res = ids1_fit
    H = res.hessian
    assert np.max(np.abs(H - H.T)) <= 1e-6 * np.max(np.abs(H))


def test_covariate_shift_moves_only_intercept():
    from idsfit import SimScenario, StreamScenario
    from idsfit.formula import INTERCEPT
    scn = SimScenario(streams={"ds": StreamScenario(150, {INTERCEPT: np.log(100.0)}, breaks=BREAKS),
                               "pc": StreamScenario(300, {INTERCEPT: np.log(70.0)}, trunc=200.0)},
                      beta={INTERCEPT: 0.0, "habitat": 0.5}, covariates=("habitat",))
    data = simulate(scn, 11)
    spec = scn.model_spec()
    base = fit(spec, data)
    shift = 1.7
    moved = {}
    for s, d in data.items():
        cov = {"habitat": d.covariates["habitat"] + shift}
        moved[s] = SurveyDataset(s, d.site_ids, d.y, d.duration, d.trunc, cov, d.breaks)
    other = fit(spec, moved)
    np.testing.assert_allclose(other.mle[0], base.mle[0] - base.mle[1] * shift, atol=1e-5)
    np.testing.assert_allclose(other.mle[1:], base.mle[1:], atol=1e-5)


def test_wald_natural_scale_example():
    iv = wald_intervals(([4.605], [0.05]))
    _, lo, hi = iv.natural()
    z = 1.959963984540054
    np.testing.assert_allclose([lo[0], hi[0]], np.exp(4.605 + np.array([-z, z]) * 0.05), rtol=1e-14)
    # the commonly quoted pair (90.65, 110.32) is rounded loosely at the upper end
    np.testing.assert_allclose([lo[0], hi[0]], [90.65, 110.32], atol=0.05)


def test_sigma_explosion_against_truth(ids1_fit):
    _, _, res = ids1_fit
    truth = dict(zip(res.names, [0.0, np.log(100.0), np.log(70.0)]))
    blown = _fake_fit(ids1_fit, mle=np.array([0.0, np.log(1500.0), np.log(70.0)]))
    assert validity_filter(blown, truth) == "INVALID(mle_explosion)"


def test_eb_worked_examples():
    assert eb_mean(2, 5.0, 0.4, "pc") == pytest.approx(5.0, rel=1e-15)
    np.testing.assert_allclose(brute_posterior_mean(2, 5.0, 0.4, "pc"), 5.0, rtol=1e-10)
    assert eb_mean(0, 0.0, 0.4, "pc") == 0.0
    assert eb_mean(0, 0.0, 0.4, "dnd") == 0.0
    assert eb_mean(3, 7.0, 1.0, "pc") == 3.0


def test_site_abundance_requires_convergence(ids1_fit):
    _, data, res = ids1_fit
    with pytest.raises(ValueError, match="converged"):
        estimate_site_abundance(_fake_fit(ids1_fit, converged=False), data["pc"])


def test_dnd_interval_matches_brute_posterior():
    from scipy import stats
    from idsfit.model import ParameterLayout
    spec = ModelSpec(breaks=BREAKS)
    layout = ParameterLayout.from_spec(spec, ["ds", "dnd"])
    res = FitResult(spec=spec, layout=layout, mle=np.array([0.4, np.log(100.0), np.log(60.0)]),
                    se=np.full(3, 0.1), vcov=np.eye(3) * 0.01, nll=0.0, converged=True, n_evals=0)
    dnd = SurveyDataset("dnd", ["a", "b"], [1, 0], 5.0, 200.0)
    lo, hi = site_abundance_interval(res, dnd, level=0.9)
    lam_disc = np.exp(0.4) * np.pi * 200.0**2 / 1e4
    q = 2 * 60.0**2 / 200.0**2 * (1 - np.exp(-200.0**2 / (2 * 60.0**2)))
    N = np.arange(0, 200)
    for k, y in enumerate([1, 0]):
        like = 1 - (1 - q) ** N if y else (1 - q) ** N
        post = stats.poisson.pmf(N, lam_disc) * like
        cdf = np.cumsum(post / post.sum())
        assert lo[k] == np.searchsorted(cdf, 0.05)
        assert hi[k] == np.searchsorted(cdf, 0.95)


def test_predict_per_km2_example():
    from idsfit.model import ParameterLayout
    spec = ModelSpec(breaks=BREAKS, density_area_m2=1e6)
    layout = ParameterLayout.from_spec(spec, ["ds"])
    res = FitResult(spec=spec, layout=layout, mle=np.array([0.0, 4.6]), se=np.array([0.1, 0.05]),
                    vcov=np.diag([0.01, 0.0025]), nll=0.0, converged=True, n_evals=0)
    pred = predict_density(res, {"c": np.zeros(4)})
    np.testing.assert_array_equal(pred.abundance, np.ones(4))
    assert pred.total == 4.0
    np.testing.assert_allclose(pred.se, 0.1, rtol=1e-14)
    draws = np.random.default_rng(1).normal(0.0, 0.1, size=100_000)
    np.testing.assert_allclose(pred.se[0], np.exp(draws).std(), rtol=0.01)
    with pytest.raises(KeyError):
        predict_density(fit_with_cov(), {"c": np.zeros(3)})


def fit_with_cov():
    from idsfit.model import ParameterLayout
    spec = ModelSpec(density="~ habitat", breaks=BREAKS)
    layout = ParameterLayout.from_spec(spec, ["ds"])
    return FitResult(spec=spec, layout=layout, mle=np.zeros(3), se=np.ones(3), vcov=np.eye(3), nll=0.0,
                     converged=True, n_evals=0)
