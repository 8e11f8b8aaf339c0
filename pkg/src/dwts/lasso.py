"""Cyclic coordinate-descent lasso on Gram statistics, plus K-fold CV for the penalty."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 100_000


class LassoFit(NamedTuple):
    coef: np.ndarray
    converged: bool
    n_sweeps: int


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@njit(cache=True)
def _sweep(G, grad, beta, lam, idx):
    max_delta = 0.0
    d = grad.shape[0]
    for j in idx:
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        z = grad[j] + gjj * old
        if z > lam:
            new = (z - lam) / gjj
        elif z < -lam:
            new = (z + lam) / gjj
        else:
            new = 0.0
        delta = new - old
        if delta != 0.0:
            beta[j] = new
            for k in range(d):
                grad[k] -= G[k, j] * delta
            if abs(delta) > max_delta:
                max_delta = abs(delta)
    return max_delta


@njit(cache=True)
def _cd_gram(G, c, lam, beta, tol, max_iter):
    """Minimise 0.5 b'Gb - c'b + lam*|b|_1 in place; returns (converged, sweeps)."""
    d = c.shape[0]
    grad = c - G @ beta
    full = np.arange(d)
    sweeps = 0
    while sweeps < max_iter:
        max_delta = _sweep(G, grad, beta, lam, full)
        sweeps += 1
        if max_delta < tol:
            return True, sweeps
        # iterate on the active set until it settles, then re-check everything
        active = np.flatnonzero(beta != 0.0)
        while sweeps < max_iter:
            max_delta = _sweep(G, grad, beta, lam, active)
            sweeps += 1
            if max_delta < tol:
                break
    return False, sweeps


def lasso_gram(G, c, lam, beta0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> LassoFit:
    """Lasso from sufficient statistics ``G = X'X/n`` and ``c = X'y/n``."""
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    beta = np.zeros(c.shape[0]) if beta0 is None else np.array(beta0, dtype=np.float64)
    converged, sweeps = _cd_gram(G, c, float(lam), beta, float(tol), int(max_iter))
    return LassoFit(beta, bool(converged), int(sweeps))


def lasso_cd(X, y, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, beta0=None) -> LassoFit:
    """Solve ``min (1/2n)||y - Xb||^2 + lam*||b||_1`` by cyclic coordinate descent.

    Zero columns get coefficient 0. When ``max_iter`` sweeps pass without the
    largest coordinate change dropping below ``tol`` the last iterate is
    returned with ``converged=False``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    return lasso_gram(X.T @ X / n, X.T @ y / n, lam, beta0, tol, max_iter)


def lasso_objective(X, y, beta, lam) -> float:
    r = y - X @ beta
    return float(r @ r / (2 * X.shape[0]) + lam * np.abs(beta).sum())


def kkt_violation(X, y, beta, lam) -> float:
    """Largest violation of the lasso optimality conditions."""
    n = X.shape[0]
    g = X.T @ (y - X @ beta) / n
    nz = beta != 0
    v_active = np.abs(g[nz] - lam * np.sign(beta[nz]))
    v_zero = np.maximum(np.abs(g[~nz]) - lam, 0.0)
    return float(max(v_active.max(initial=0.0), v_zero.max(initial=0.0)))


def lambda_max(X, y) -> float:
    return float(np.max(np.abs(X.T @ y)) / X.shape[0])


def lambda_grid(lam_max, grid_size, ratio=1e-3) -> np.ndarray:
    if grid_size == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, lam_max * ratio, grid_size)


def lasso_path_gram(G, c, lambdas, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> np.ndarray:
    """Warm-started solutions along a decreasing penalty grid, shape (len(lambdas), d)."""
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    beta = np.zeros(c.shape[0])
    out = np.empty((len(lambdas), c.shape[0]))
    for i, lam in enumerate(lambdas):
        _cd_gram(G, c, float(lam), beta, float(tol), int(max_iter))
        out[i] = beta
    return out


def select_lambda_cv(X, y, n_folds=10, grid_size=20, rng=None, ratio=1e-3,
                     tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
    """Pick the penalty minimising K-fold held-out squared error.

    The grid runs log-spaced from ``max|X'y|/n`` down to ``ratio`` times that.
    Folds come from a permutation drawn from ``rng``; ties resolve toward the
    larger penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n_folds < 2 or n < n_folds:
        raise ValueError("need n_folds >= 2 and at least n_folds rows")
    lam_max = lambda_max(X, y)
    if lam_max <= 0.0:
        # y is orthogonal to every column: every penalty gives b = 0
        return float(np.finfo(float).eps)
    grid = lambda_grid(lam_max, grid_size, ratio)
    if grid_size == 1:
        return float(grid[0])
    rng = np.random.default_rng(rng)
    folds = np.array_split(rng.permutation(n), n_folds)
    XtX = X.T @ X
    Xty = X.T @ y
    sse = np.zeros(len(grid))
    for test in folds:
        Xte, yte = X[test], y[test]
        n_tr = n - len(test)
        G = (XtX - Xte.T @ Xte) / n_tr
        c = (Xty - Xte.T @ yte) / n_tr
        coefs = lasso_path_gram(G, c, grid, tol, max_iter)
        resid = yte[:, None] - Xte @ coefs.T
        sse += np.sum(resid**2, axis=0)
    return float(grid[int(np.argmin(sse))])
