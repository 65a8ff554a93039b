import numpy as np
import pytest
from conftest import random_instance
from numpy.testing import assert_allclose

from dtrs.correlation import CorrelationSpec
from dtrs.exceptions import ConfigError, RidgeDegenerateError
from dtrs.inference import (
    SandwichCovariance,
    normal_quantile,
    prediction_interval,
    prediction_intervals,
    sandwich_covariance,
)
from dtrs.model import DTRSModel, design_rows
from dtrs.tensor import TemporalTensor


def make_model(tensor, scheme, bases, params, corr=None, lam=0.0):
    return DTRSModel(params, scheme, bases, corr or CorrelationSpec(), lam, tensor.dims,
                     (0.0, 1.0), {})


def ols_instance(rng):
    tensor, scheme, bases, params = random_instance(rng, n_obs=120, n_times=12, dims=(5, 4, 5))
    W = design_rows(params, scheme, bases, tensor.index, tensor.time)
    gamma = np.linalg.lstsq(W, tensor.value, rcond=None)[0]
    r, M = params.alpha.shape
    params = params.replace(alpha=gamma[:r * M].reshape(r, M), beta=gamma[r * M:].reshape(-1, M))
    return tensor, scheme, bases, params, W


def test_matches_cluster_robust_ols(rng):
    sm = pytest.importorskip("statsmodels.api")
    tensor, scheme, bases, params, W = ols_instance(rng)
    model = make_model(tensor, scheme, bases, params)
    sw = sandwich_covariance(model, tensor)
    cell_id = np.repeat(np.arange(tensor.n_cells), tensor.cell_sizes)
    res = sm.OLS(tensor.value, W).fit(cov_type="cluster", cov_kwds={
        "groups": cell_id, "use_correction": False, "df_correction": False})
    assert_allclose(sw.cov_gamma, res.cov_params(), rtol=1e-8, atol=1e-12)
    assert sw.asymmetry < 1e-10


def test_zero_residuals_give_zero_covariance(rng):
    tensor, scheme, bases, params, W = ols_instance(rng)
    exact = TemporalTensor(tensor.dims, tensor.index, tensor.time, W @ np.concatenate(
        [params.alpha.ravel(), params.beta.ravel()]))
    sw = sandwich_covariance(make_model(exact, scheme, bases, params, lam=0.5), exact)
    assert np.max(np.abs(sw.cov_gamma)) < 1e-20
    assert sw.sigma2_train < 1e-25


def test_covariance_is_symmetric_psd_under_ar1(rng):
    tensor, scheme, bases, params = random_instance(rng, n_obs=80, n_times=10)
    sw = sandwich_covariance(make_model(tensor, scheme, bases, params, CorrelationSpec("ar1", 0.5),
                                        lam=1.0), tensor)
    assert_allclose(sw.cov_gamma, sw.cov_gamma.T)
    assert np.linalg.eigvalsh(sw.cov_gamma).min() > -1e-12
    assert sw.asymmetry < 1e-10
    assert np.all(sw.standard_errors() >= 0)


def test_unidentified_beta_without_ridge_raises(rng):
    tensor, scheme, bases, params = random_instance(rng, num_knots=3, n_times=4)
    with pytest.raises(RidgeDegenerateError, match="lambda"):
        sandwich_covariance(make_model(tensor, scheme, bases, params), tensor)
    sandwich_covariance(make_model(tensor, scheme, bases, params, lam=1.0), tensor)


def test_normal_quantiles():
    assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)
    assert normal_quantile(0.75) == pytest.approx(0.674490, abs=1e-6)
    assert normal_quantile(0.5) == 0.0


def test_known_interval():
    # yhat = 2, se^2 = 0.25 * 0 + 1 gives 2 +/- 1.959964
    from dtrs.model import Bases, ModelParams
    from dtrs.splines import SplineBasis
    from dtrs.tensor import SubgroupScheme

    bases = Bases(SplineBasis(2, ()))
    params = ModelParams((np.ones((1, 1)),), (np.zeros(1),), np.array([[2.0, 0.0, 0.0]]),
                         np.zeros((1, 3)))
    scheme = SubgroupScheme.uniform((1,))
    model = DTRSModel(params, scheme, bases, CorrelationSpec(), 1.0, (1,), (0.0, 1.0), {})
    sw = SandwichCovariance(np.zeros((6, 6)), np.zeros((6, 6)), np.zeros((6, 6)), 1.0)
    est = prediction_interval(model, sw, (1,), 0.5)
    assert est.yhat == pytest.approx(2.0)
    assert est.lower == pytest.approx(2.0 - 1.959964, abs=1e-6)
    assert est.upper == pytest.approx(2.0 + 1.959964, abs=1e-6)
    half = prediction_interval(model, sw, (1,), 0.5, level=0.5)
    assert half.upper - half.yhat == pytest.approx(0.674490, abs=1e-6)
    cov = np.zeros((6, 6))
    cov[0, 0] = 0.44
    wider = prediction_interval(model, SandwichCovariance(cov, cov, cov, 1.0), (1,), 0.5)
    assert wider.se_prediction == pytest.approx(1.2)


def test_width_grows_with_level(rng):
    tensor, scheme, bases, params = random_instance(rng, n_obs=80, n_times=10)
    model = make_model(tensor, scheme, bases, params, lam=1.0)
    sw = sandwich_covariance(model, tensor)
    widths = []
    for level in (0.5, 0.8, 0.95, 0.99):
        yhat, lo, hi, se, clamped = prediction_intervals(model, sw, tensor.index, tensor.time,
                                                         level)
        assert np.all(lo <= yhat) and np.all(yhat <= hi)
        assert not clamped.any()
        widths.append(hi - lo)
    assert all(np.all(b > a) for a, b in zip(widths, widths[1:]))
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            prediction_intervals(model, sw, tensor.index, tensor.time, bad)


def test_negative_quadratic_form_is_clamped(rng):
    tensor, scheme, bases, params = random_instance(rng)
    model = make_model(tensor, scheme, bases, params, lam=1.0)
    n = params.alpha.size + params.beta.size
    sw = SandwichCovariance(-np.eye(n), np.eye(n), np.eye(n), 0.3)
    _, _, _, se, clamped = prediction_intervals(model, sw, tensor.index, tensor.time)
    assert clamped.all()
    assert_allclose(se, np.sqrt(0.3))


def test_dict_round_trip(rng):
    tensor, scheme, bases, params = random_instance(rng, n_obs=80, n_times=10)
    model = make_model(tensor, scheme, bases, params, lam=1.0)
    sw = sandwich_covariance(model, tensor)
    again = SandwichCovariance.from_dict(sw.to_dict())
    assert_allclose(again.cov_gamma, sw.cov_gamma)
    a = prediction_intervals(model, sw, tensor.index, tensor.time)
    b = prediction_intervals(model, again, tensor.index, tensor.time)
    for x, y in zip(a, b):
        assert_allclose(x, y)
