import json

import numpy as np
import pytest
from conftest import dense_sigma, random_instance
from numpy.testing import assert_allclose

from dtrs.correlation import CorrelationSpec
from dtrs.exceptions import BoundsError, ColdStartError, ConfigError
from dtrs.model import (
    Bases,
    DTRSModel,
    HyperParams,
    ModelParams,
    design_rows,
    dumps,
    objective,
    predict,
    predict_cell,
)
from dtrs.splines import SplineBasis


def loop_prediction(params, scheme, bases, idx, t):
    """Prediction written out term by term."""
    B = bases.h(np.array([t]))[0]
    A = bases.g(np.array([t]))[0]
    total = 0.0
    for j in range(params.rank):
        prod = 1.0
        for k, p in enumerate(params.P):
            prod *= p[idx[k], j] if idx[k] < p.shape[0] else 0.0
        total += (params.alpha[j] @ B) * prod
    e = int(scheme.time_group([t])[0])
    sub = params.beta[e] @ A
    for k, v in enumerate(params.q):
        sub *= v[scheme.mode_groups[k][idx[k]]]
    return total + sub


def test_predict_matches_explicit_sum(rng):
    tensor, scheme, bases, params = random_instance(rng)
    got = predict(params, scheme, bases, tensor.index, tensor.time)
    want = [loop_prediction(params, scheme, bases, i, t) for i, t in zip(tensor.index, tensor.time)]
    assert_allclose(got, want, rtol=1e-12)
    i0 = tensor.index[3]
    assert predict_cell(params, scheme, bases, i0 + 1, tensor.time[3]) == pytest.approx(got[3])


def test_design_rows_are_linear_in_spline_coefficients(rng):
    tensor, scheme, bases, params = random_instance(rng)
    W = design_rows(params, scheme, bases, tensor.index, tensor.time)
    gamma = np.concatenate([params.alpha.ravel(), params.beta.ravel()])
    assert_allclose(W @ gamma, predict(params, scheme, bases, tensor.index, tensor.time),
                    rtol=1e-12, atol=1e-12)


def test_cold_subject_gets_subgroup_term_only(rng):
    tensor, scheme, bases, params = random_instance(rng, dims=(4, 3, 4))
    # scheme covers a fifth item that the factor matrix does not
    groups = list(scheme.mode_groups)
    groups[2] = np.append(groups[2], 1)
    wider = type(scheme)(tuple(groups), scheme.time_groups, scheme.n_mode_groups)
    idx, t = np.array([[1, 2, 4]]), np.array([0.4])
    A = bases.g(t)[0]
    e = wider.time_group(t)[0]
    expected = (params.beta[e] @ A) * params.q[0][1] * params.q[1][2 % 2] * params.q[2][1]
    assert abs(predict(params, wider, bases, idx, t)[0] - expected) < 1e-12
    with pytest.raises(ColdStartError):
        predict(params, scheme, bases, idx, t)


def test_objective_matches_dense_definition(rng):
    tensor, scheme, bases, params = random_instance(rng)
    spec = CorrelationSpec("ar1", 0.4, 1.3)
    lam = 0.7
    resid = tensor.value - predict(params, scheme, bases, tensor.index, tensor.time)
    total = 0.0
    bounds = np.append(tensor.cell_starts, tensor.n_obs)
    for a, b in zip(bounds[:-1], bounds[1:]):
        S = dense_sigma("ar1", 0.4, 1.3, b - a)
        total += resid[a:b] @ np.linalg.solve(S, resid[a:b])
    penalty = sum(np.sum(p**2) for p in params.P) + sum(np.sum(v**2) for v in params.q)
    penalty += np.sum(params.alpha**2) + np.sum(params.beta**2)
    assert objective(params, tensor, scheme, bases, spec, lam) == pytest.approx(
        total + lam * penalty, rel=1e-12)


def test_params_validation_and_blocks(rng):
    _, _, _, params = random_instance(rng)
    with pytest.raises(ConfigError):
        ModelParams(params.P, params.q[:2], params.alpha, params.beta)
    with pytest.raises(ConfigError):
        ModelParams(params.P, params.q, params.alpha, params.beta[:, :2])
    new = params.with_block("q2", np.zeros(2))
    assert_allclose(new.q[1], 0.0)
    assert_allclose(new.q[0], params.q[0])
    with pytest.raises(ValueError):
        params.alpha[0, 0] = 1.0
    assert params.is_finite()


def test_hyper_validation():
    for bad in [dict(r=0), dict(r=65), dict(lam=-1.0), dict(epsilon=0.0), dict(max_iter=0)]:
        with pytest.raises(ConfigError):
            HyperParams(**bad)


def test_bases_size_checks():
    with pytest.raises(ConfigError):
        Bases(SplineBasis(2, (0.5,)), SplineBasis(2, ()))
    with pytest.raises(ConfigError):
        Bases(SplineBasis(2, tuple(np.linspace(0.01, 0.99, 70))))


def test_predict_rejects_bad_index(rng):
    tensor, scheme, bases, params = random_instance(rng)
    with pytest.raises(ConfigError):
        predict(params, scheme, bases, [[0, 0]], [0.5])
    with pytest.raises(BoundsError):
        predict_cell(params, scheme, bases, (0, 1, 1), 0.5)


def test_model_json_round_trip(rng):
    tensor, scheme, bases, params = random_instance(rng)
    model = DTRSModel(params, scheme, bases, CorrelationSpec("ar1", 0.3), 2.0, tensor.dims,
                      (1.0, 5.0), {"note": "x"})
    text = model.to_json()
    again = DTRSModel.from_json(text)
    assert again.to_json() == text
    assert_allclose(again.predict(tensor.index, tensor.time),
                    model.predict(tensor.index, tensor.time), rtol=1e-10)
    assert again.rescale_time(3.0) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        DTRSModel.from_dict({"format": "other"})


def test_dumps_is_byte_stable():
    a = dumps({"b": 1.0 / 3.0, "a": [np.float64(2.0), np.int64(3)], "c": float("nan")})
    assert a == dumps(json.loads(a))
    assert json.loads(a) == {"a": [2.0, 3], "b": 0.333333333333, "c": None}
    assert a.index('"a"') < a.index('"b"')
