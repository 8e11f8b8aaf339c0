"""Offline deconfounding: spectral trim, doubly debiased lasso, thresholding and masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .lasso import DEFAULT_MAX_ITER, DEFAULT_TOL, lasso_gram, select_lambda_cv

log = logging.getLogger(__name__)

_DENOM_EPS = 1e-10


class DegenerateDesignError(ValueError):
    pass


@dataclass
class TrimTransform:
    """Symmetric operator ``Q = I - U diag(1 - s) U'`` acting on R^n.

    ``U`` holds the left singular vectors of the design with positive singular
    value and ``s = min(d, tau) / d``. Directions outside span(U) are left alone.
    """

    U: np.ndarray
    singular_values: np.ndarray
    tau: float

    @property
    def shrink(self) -> np.ndarray:
        return np.minimum(self.singular_values, self.tau) / self.singular_values

    @property
    def n(self) -> int:
        return self.U.shape[0]

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        coef = self.U.T @ v
        w = 1.0 - self.shrink
        coef = coef * (w[:, None] if coef.ndim == 2 else w)
        return v - self.U @ coef

    __matmul__ = apply

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.n))


def _positive(d: np.ndarray, shape) -> np.ndarray:
    if d.size == 0 or d.max() <= 0:
        return np.zeros(d.shape, dtype=bool)
    return d > d.max() * max(shape) * np.finfo(float).eps


def trim_transform(Z, quantile: float = 0.5) -> TrimTransform:
    """Trim transform capping every singular value of ``Z`` at a quantile of them.

    With the default ``quantile=0.5`` the cap is the median positive singular
    value, so ``Q @ Z`` has its leading (confounder-driven) singular values
    pulled down to that level.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("trim_transform needs a 2-d design with at least 2 rows")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    U, d, _ = np.linalg.svd(Z, full_matrices=False)
    keep = _positive(d, Z.shape)
    if not keep.any():
        raise DegenerateDesignError("degenerate design")
    d = d[keep]
    return TrimTransform(U[:, keep], d, float(np.quantile(d, quantile)))


def _trim_from_gram(Zm, Gm, zj, gj, quantile):
    """Trimmed design and response for one nodewise regression.

    Works from the Gram matrix ``Gm = Zm'Zm`` and ``gj = Zm'zj`` so no SVD of
    the n-row matrix is needed. Returns ``(P Zm, P zj)``.
    """
    evals, V = np.linalg.eigh(Gm)
    evals = np.clip(evals, 0.0, None)
    d = np.sqrt(evals)
    keep = _positive(d, Zm.shape)
    if not keep.any():
        raise DegenerateDesignError("degenerate design")
    d, V = d[keep], V[:, keep]
    tau = float(np.quantile(d, quantile))
    s = np.minimum(d, tau) / d
    Zt = Zm @ ((V * s) @ V.T)
    zt = zj - Zm @ (V @ ((1.0 - s) / d**2 * (V.T @ gj)))
    return Zt, zt


@dataclass
class DdlOptions:
    lambda_rule: str = "cv"  # "cv" or "fixed"
    n_folds: int = 10
    grid_size: int = 20
    lambda_ratio: float = 1e-3
    fixed_const: float = 1.1
    trim_quantile: float = 0.5
    center: bool = False
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.lambda_rule not in ("cv", "fixed"):
            raise ValueError(f"unknown lambda_rule {self.lambda_rule!r}")


@dataclass
class DdlEstimate:
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    lam: float
    support_size: int
    noise_sd_hat: float
    nonidentifiable: list[int] = field(default_factory=list)
    converged: bool = True
    degenerate: list[int] = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.theta_hat)

    def confidence_interval(self, alpha: float = 0.05):
        z = norm.ppf(1 - alpha / 2)
        return self.theta_hat - z * self.sigma_hat, self.theta_hat + z * self.sigma_hat

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "sigma_hat": [float(s) if np.isfinite(s) else None for s in self.sigma_hat],
            "lambda": self.lam,
            "support_size": self.support_size,
            "noise_sd_hat": self.noise_sd_hat,
            "nonidentifiable": list(self.nonidentifiable),
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, data: dict) -> DdlEstimate:
        sigma = [np.inf if s is None else s for s in data["sigma_hat"]]
        return cls(
            theta_hat=np.asarray(data["theta_hat"], dtype=float),
            sigma_hat=np.asarray(sigma, dtype=float),
            lam=float(data["lambda"]),
            support_size=int(data["support_size"]),
            noise_sd_hat=float(data["noise_sd_hat"]),
            nonidentifiable=list(data.get("nonidentifiable", [])),
            degenerate=list(data.get("degenerate", [])),
        )


def _fit_lasso(X, y, opts: DdlOptions, rng):
    n = X.shape[0]
    G = X.T @ X / n
    c = X.T @ y / n
    if opts.lambda_rule == "cv":
        lam = select_lambda_cv(X, y, opts.n_folds, opts.grid_size, rng, opts.lambda_ratio,
                               opts.tol, opts.max_iter)
        fit = lasso_gram(G, c, lam, tol=opts.tol, max_iter=opts.max_iter)
    else:
        # fixed-point between the universal penalty and the residual scale
        d = X.shape[1]
        sd = float(np.sqrt(y @ y / n))
        fit = None
        for _ in range(5):
            lam = max(opts.fixed_const * sd * np.sqrt(2 * np.log(max(d, 2)) / n), 1e-12)
            fit = lasso_gram(G, c, lam, None if fit is None else fit.coef, opts.tol, opts.max_iter)
            r = y - X @ fit.coef
            df = max(n - int(np.count_nonzero(fit.coef)), 1)
            sd = float(np.sqrt(r @ r / df))
    return fit, float(lam)


def ddl_fit(Z, y, options: DdlOptions | None = None, rng=None) -> DdlEstimate:
    """Doubly debiased lasso estimates and standard errors for every column of ``Z``.

    The outcome model is fit on ``(QZ, Qy)`` where ``Q`` trims the spectrum of
    ``Z``. Each coordinate is then corrected using the residual ``w_j`` of a
    nodewise lasso run on a second trim transform built from ``Z`` without
    column ``j``::

        theta_j = beta_j + w_j'Q(y - Z beta) / (w_j'Q z_j)
        sigma_j = noise_sd * ||Q w_j|| / |w_j'Q z_j|

    Rows are put in a canonical order first, so the result does not depend on
    how the rows of ``(Z, y)`` were shuffled.
    """
    opts = options or DdlOptions()
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = Z.shape
    if len(y) != n:
        raise ValueError("Z and y disagree on the number of rows")
    if n <= 10 or p < 2:
        raise ValueError("ddl_fit needs more than 10 rows and at least 2 columns")
    seeds = np.random.default_rng(rng).integers(0, 2**63, size=p + 1)

    order = np.lexsort(np.column_stack([Z, y]).T[::-1])
    Z, y = Z[order], y[order]
    col_ok = np.ptp(Z, axis=0) > 0 if opts.center else np.any(Z != 0, axis=0)
    if opts.center:
        Z = Z - Z.mean(axis=0)
        y = y - y.mean()

    theta_hat = np.zeros(p)
    sigma_hat = np.full(p, np.inf)
    cols = np.flatnonzero(col_ok)
    if len(cols) == 0:
        raise DegenerateDesignError("degenerate design")
    Zc = Z[:, cols]

    Q = trim_transform(Zc, opts.trim_quantile)
    Zt = Q.apply(Zc)
    yt = Q.apply(y)
    fit, lam = _fit_lasso(Zt, yt, opts, seeds[0])
    beta = fit.coef
    converged = fit.converged
    support = int(np.count_nonzero(beta))
    resid = yt - Zt @ beta
    noise_sd = float(np.sqrt(resid @ resid / max(n - support, 1)))

    G = Zc.T @ Zc
    pc = len(cols)
    degenerate = [int(j) for j in np.flatnonzero(~col_ok)]
    nonid = []
    for k in range(pc):
        j = cols[k]
        if pc == 1:
            w = Zc[:, 0].copy()
        else:
            rest = np.r_[0:k, k + 1:pc]
            Zm = Zc[:, rest]
            Pz_m, Pz_j = _trim_from_gram(Zm, G[np.ix_(rest, rest)], Zc[:, k], G[rest, k],
                                         opts.trim_quantile)
            gfit, _ = _fit_lasso(Pz_m, Pz_j, opts, seeds[k + 1])
            converged &= gfit.converged
            w = Pz_j - Pz_m @ gfit.coef
        denom = float(w @ Zt[:, k])
        if abs(denom) < _DENOM_EPS:
            log.warning("non-identifiable coordinate %d", j)
            nonid.append(int(j))
            theta_hat[j] = beta[k]
            continue
        theta_hat[j] = beta[k] + float(w @ resid) / denom
        sigma_hat[j] = noise_sd * float(np.linalg.norm(Q.apply(w))) / abs(denom)

    return DdlEstimate(theta_hat, sigma_hat, lam, support, noise_sd, nonid, converged, degenerate)


def choose_kappa_theoretical(estimates, alpha: float, beta_theta: float, clamp: bool = True) -> float:
    """Threshold ``beta_theta - max_{a,i} z_{1-alpha/2} sigma_{a,i}``.

    ``clamp=True`` (default) keeps the nonnegative part. ``clamp=False`` is the
    literal ``min{., 0}`` form, which is never positive and so keeps every
    coordinate.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if beta_theta <= 0:
        raise ValueError("beta_theta must be positive")
    sig = np.concatenate([np.asarray(e.sigma_hat, dtype=float) for e in estimates])
    finite = np.isfinite(sig)
    if not finite.all():
        log.warning("excluding %d non-identifiable coordinates from the kappa rule",
                    int((~finite).sum()))
    max_sig = float(sig[finite].max()) if finite.any() else 0.0
    raw = beta_theta - norm.ppf(1 - alpha / 2) * max_sig
    return max(raw, 0.0) if clamp else min(raw, 0.0)


@dataclass
class Mask:
    selected: np.ndarray

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=bool)

    @property
    def p_eff(self) -> int:
        return int(self.selected.sum())

    @property
    def p(self) -> int:
        return len(self.selected)

    @classmethod
    def full(cls, p: int) -> Mask:
        return cls(np.ones(p, dtype=bool))

    def to_list(self) -> list[bool]:
        return [bool(s) for s in self.selected]


def build_mask(theta_hat, kappa: float) -> Mask:
    return Mask(np.abs(np.asarray(theta_hat, dtype=float)) >= kappa)


def apply_mask(v, mask: Mask) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[0] != mask.p:
        raise ValueError(f"vector has length {v.shape[0]}, mask has {mask.p}")
    return v[mask.selected]
