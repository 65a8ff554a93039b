import numpy as np
import pytest

from dtrs.model import Bases, ModelParams
from dtrs.splines import build_basis
from dtrs.tensor import IntervalTimeGroups, SubgroupScheme, TemporalTensor


def random_instance(rng, dims=(4, 3, 4), r=2, n_obs=40, m=(2, 2, 2), m_time=2, num_knots=1,
                    n_times=6):
    """Small random tensor, round-robin scheme, basis and parameter set.

    Every subject and every subgroup gets at least two observations so no
    block is frozen.
    """
    times = np.sort(rng.uniform(0.02, 0.98, size=n_times))
    cells = np.array(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")).reshape(len(dims), -1).T
    while True:
        pick = rng.choice(cells.shape[0] * n_times, size=n_obs, replace=False)
        idx = cells[pick // n_times]
        t = times[pick % n_times]
        counts_ok = all(np.bincount(idx[:, k], minlength=n).min() >= 2 for k, n in enumerate(dims))
        if counts_ok:
            break
    groups = tuple(np.arange(n) % mk for n, mk in zip(dims, m))
    tg = IntervalTimeGroups.from_labelled_times(times, np.arange(n_times) % m_time, m_time)
    scheme = SubgroupScheme(groups, tg, m)
    tensor = TemporalTensor(dims, idx, t, rng.normal(size=n_obs))
    bases = Bases(build_basis(2, num_knots))
    M = bases.size
    params = ModelParams(
        tuple(rng.normal(size=(n, r)) for n in dims),
        tuple(rng.normal(size=mk) for mk in m),
        rng.normal(size=(r, M)),
        rng.normal(size=(m_time, M)),
    )
    return tensor, scheme, bases, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_sigma(structure, rho, variance, n):
    """Working covariance of one cell written out from its definition."""
    i = np.arange(n)
    if structure == "independence":
        R = np.eye(n)
    elif structure == "exchangeable":
        R = np.full((n, n), rho) + (1.0 - rho) * np.eye(n)
    else:
        R = rho ** np.abs(i[:, None] - i[None, :])
    return variance * R


def oracle_residuals(tensor, scheme, bases, corr, lam, make_params, theta):
    """Stacked ``L_c^{-1}(y_c - yhat_c)`` and ``sqrt(lam) theta`` for least_squares."""
    from dtrs.model import predict

    params = make_params(theta)
    resid = tensor.value - predict(params, scheme, bases, tensor.index, tensor.time)
    out = []
    bounds = np.append(tensor.cell_starts, tensor.n_obs)
    for a, b in zip(bounds[:-1], bounds[1:]):
        S = dense_sigma(corr.structure, corr.rho, corr.variance, b - a)
        L = np.linalg.cholesky(S)
        out.append(np.linalg.solve(L, resid[a:b]))
    out.append(np.sqrt(lam) * np.asarray(theta))
    return np.concatenate(out)


def numeric_block_minimizer(tensor, scheme, bases, corr, lam, params, block):
    """Generic trust-region least-squares minimizer over one block."""
    from scipy.optimize import least_squares

    current = {"alpha": params.alpha, "beta": params.beta}
    if block[0] == "P":
        start = params.P[int(block[1:]) - 1]
    elif block[0] == "q":
        start = params.q[int(block[1:]) - 1]
    else:
        start = current[block]
    shape = start.shape

    def make(theta):
        return params.with_block(block, np.asarray(theta).reshape(shape))

    sol = least_squares(
        lambda th: oracle_residuals(tensor, scheme, bases, corr, lam, make, th),
        np.zeros(start.size), jac="3-point", method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000,
    )
    return sol.x.reshape(shape)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
