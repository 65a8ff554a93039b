import numpy as np
import pytest
from conftest import dense_sigma
from numpy.testing import assert_allclose

from dtrs.correlation import (
    CorrelationSpec,
    Whitener,
    correlation_matrix,
    covariance_factor,
    estimate_nuisance,
    whiten,
)
from dtrs.exceptions import ConfigError, InsufficientDataError, NotPositiveDefiniteError


def test_correlation_matrices():
    assert_allclose(correlation_matrix(CorrelationSpec(), 3), np.eye(3))
    ex = correlation_matrix(CorrelationSpec("exchangeable", 0.3), 3)
    assert_allclose(ex, [[1, 0.3, 0.3], [0.3, 1, 0.3], [0.3, 0.3, 1]])
    ar = correlation_matrix(CorrelationSpec("ar1", 0.5), 3)
    assert_allclose(ar, [[1, 0.5, 0.25], [0.5, 1, 0.5], [0.25, 0.5, 1]])
    gaps = correlation_matrix(CorrelationSpec("ar1", 0.5), 3, gaps=[1.0, 2.0])
    assert gaps[0, 2] == pytest.approx(0.125)


def test_exchangeable_not_positive_definite():
    with pytest.raises(NotPositiveDefiniteError):
        correlation_matrix(CorrelationSpec("exchangeable", -0.5), 3)
    with pytest.raises(NotPositiveDefiniteError):
        Whitener(CorrelationSpec("exchangeable", -0.5), [0], 3)


def test_spec_validation():
    with pytest.raises(ConfigError):
        CorrelationSpec("toeplitz")
    with pytest.raises(ConfigError):
        CorrelationSpec("ar1", rho=1.0)
    with pytest.raises(ConfigError):
        CorrelationSpec(variance=0.0)


@pytest.mark.parametrize("structure, rho", [("independence", 0.0), ("ar1", 0.7),
                                            ("ar1", -0.4), ("exchangeable", 0.35),
                                            ("exchangeable", -0.1)])
def test_whitener_matches_dense_inverse(structure, rho, rng):
    spec = CorrelationSpec(structure, rho, 1.7)
    sizes = [1, 4, 2, 5]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    n = sum(sizes)
    x = rng.normal(size=(n, 3))
    W = Whitener(spec, starts, n)
    wx = W(x)
    for a, s in zip(starts, sizes):
        S = dense_sigma(structure, rho, 1.7, s)
        # same quadratic form as the dense inverse
        assert_allclose(wx[a:a + s].T @ wx[a:a + s], x[a:a + s].T @ np.linalg.solve(S, x[a:a + s]),
                        rtol=1e-10, atol=1e-12)
    assert_allclose(W(x[:, 0]), wx[:, 0])


def test_covariance_factor_reproduces_sigma():
    for spec in [CorrelationSpec("ar1", 0.6, 2.0), CorrelationSpec("exchangeable", 0.2, 0.5)]:
        L = covariance_factor(spec, 4)
        assert_allclose(L @ L.T, dense_sigma(spec.structure, spec.rho, spec.variance, 4))


def test_time_lag_whitening(rng):
    spec = CorrelationSpec("ar1", 0.8)
    gaps = np.array([0.5, 2.0, 1.0])
    x = rng.normal(size=4)
    S = correlation_matrix(spec, 4, gaps)
    w = whiten(spec, 4, x, gaps)
    assert_allclose(w @ w, x @ np.linalg.solve(S, x))
    L = covariance_factor(spec, 4, gaps)
    assert_allclose(L @ L.T, S)


def test_whitener_shape_check():
    with pytest.raises(ConfigError):
        Whitener(CorrelationSpec(), [0], 3)(np.zeros(4))


def _ar1_cells(rng, rho, n_cells, length):
    e = np.empty((n_cells, length))
    e[:, 0] = rng.normal(size=n_cells)
    for s in range(1, length):
        e[:, s] = rho * e[:, s - 1] + np.sqrt(1 - rho**2) * rng.normal(size=n_cells)
    return e


def test_estimate_ar1_recovers_rho(rng):
    e = 1.5 * _ar1_cells(rng, 0.85, 4000, 10)
    spec = estimate_nuisance(list(e), "ar1")
    assert spec.rho == pytest.approx(0.85, abs=0.02)
    assert spec.variance == pytest.approx(2.25, rel=0.05)
    flat = estimate_nuisance(e.ravel(), "ar1", cell_starts=np.arange(0, e.size, 10))
    assert flat == spec


def test_estimate_exchangeable_recovers_rho(rng):
    shared = rng.normal(size=(5000, 1)) * np.sqrt(0.4)
    e = shared + rng.normal(size=(5000, 6)) * np.sqrt(0.6)
    spec = estimate_nuisance(list(e), "exchangeable")
    assert spec.rho == pytest.approx(0.4, abs=0.03)


def test_estimate_time_lag(rng):
    # equally spaced unit gaps: time-lag estimate agrees with the index-lag one
    e = _ar1_cells(rng, 0.6, 3000, 6)
    times = np.tile(np.arange(6, dtype=float), 3000)
    spec = estimate_nuisance(e.ravel(), "ar1", cell_starts=np.arange(0, e.size, 6),
                             lag="time", times=times)
    assert spec.rho == pytest.approx(0.6, abs=0.03)


def test_estimate_clamps_and_needs_pairs():
    spec = estimate_nuisance([np.array([1.0, 1.0, 1.0])], "ar1")
    assert spec.rho == 0.99
    with pytest.raises(InsufficientDataError):
        estimate_nuisance([np.array([1.0]), np.array([2.0])], "ar1")
    ind = estimate_nuisance([np.array([1.0]), np.array([3.0])], "independence")
    assert ind.variance == pytest.approx(5.0) and ind.rho == 0.0
