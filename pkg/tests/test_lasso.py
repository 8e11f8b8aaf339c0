from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwts.lasso import (kkt_violation, lambda_grid, lambda_max, lasso_cd, lasso_objective,
                        select_lambda_cv, soft_threshold)
from oracles import lasso_fista, lasso_obj


def test_soft_threshold():
    np.testing.assert_array_equal(soft_threshold(np.array([3.0, -3.0, 0.5]), 1.0), [2.0, -2.0, 0.0])


def test_null_threshold_gives_zero():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 8))
    y = rng.standard_normal(50)
    fit = lasso_cd(X, y, lambda_max(X, y))
    assert np.all(fit.coef == 0)
    assert fit.converged


def test_orthonormal_design_closed_form():
    rng = np.random.default_rng(1)
    n = 40
    Qm, _ = np.linalg.qr(rng.standard_normal((n, 5)))
    X = Qm * np.sqrt(n)  # X'X/n = I
    y = rng.standard_normal(n) * 3
    lam = 0.4
    fit = lasso_cd(X, y, lam, tol=1e-12)
    np.testing.assert_allclose(fit.coef, soft_threshold(X.T @ y / n, lam), atol=1e-10)


def test_matches_projected_gradient_oracle():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((20, 5))
    y = X @ np.array([1.0, 0, -2, 0, 0.5]) + 0.3 * rng.standard_normal(20)
    b = lasso_cd(X, y, 0.1).coef
    ref = lasso_fista(X, y, 0.1)
    assert abs(lasso_objective(X, y, b, 0.1) - lasso_obj(X, y, ref, 0.1)) < 1e-6


def test_nonpositive_lambda_rejected():
    with pytest.raises(ValueError):
        lasso_cd(np.eye(3), np.ones(3), 0.0)


def test_zero_column_gets_zero():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 4))
    X[:, 2] = 0
    fit = lasso_cd(X, X[:, 0] * 2, 0.01)
    assert fit.coef[2] == 0


def test_max_iter_flags_nonconvergence():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((30, 10))
    X[:, 1] = X[:, 0] + 1e-3 * rng.standard_normal(30)
    fit = lasso_cd(X, X @ np.ones(10), 1e-4, tol=1e-14, max_iter=1)
    assert not fit.converged


@settings(max_examples=40, deadline=None)
@given(n=st.integers(5, 60), d=st.integers(1, 15), seed=st.integers(0, 2**31 - 1),
       frac=st.floats(0.01, 0.9))
def test_kkt_property(n, d, seed, frac):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = X @ rng.standard_normal(d) + rng.standard_normal(n)
    lam = frac * lambda_max(X, y)
    if lam <= 0:
        return
    fit = lasso_cd(X, y, lam)
    assert kkt_violation(X, y, fit.coef, lam) <= 1e-5


def test_cv_grid_size_one_returns_lambda_max():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 5))
    y = rng.standard_normal(40)
    assert select_lambda_cv(X, y, grid_size=1, rng=0) == lambda_max(X, y)


def test_cv_pure_noise_prefers_large_penalty():
    picks = []
    for s in range(10):
        rng = np.random.default_rng(100 + s)
        X = rng.standard_normal((200, 10))
        y = rng.standard_normal(200)
        picks.append(select_lambda_cv(X, y, rng=s) / lambda_max(X, y))
    assert np.median(picks) >= 0.25


def test_cv_noiseless_picks_small_penalty():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((200, 10))
    y = X @ rng.standard_normal(10)
    grid = lambda_grid(lambda_max(X, y), 20)
    lam = select_lambda_cv(X, y, rng=0)
    assert lam <= np.quantile(grid, 0.25)


def test_cv_deterministic_given_rng():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((80, 6))
    y = X[:, 0] + rng.standard_normal(80)
    assert select_lambda_cv(X, y, rng=11) == select_lambda_cv(X, y, rng=11)


def test_cv_needs_enough_rows():
    with pytest.raises(ValueError):
        select_lambda_cv(np.ones((5, 2)), np.ones(5), n_folds=10)
