"""Linear Thompson sampling (cold and warm-started), OFUL and the oracle policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular

from .deconfound import DdlEstimate, Mask, apply_mask
from .synth import ArmParams, best_arm

VARIANCE_MODES = ("variance", "stderr")


class PosteriorError(RuntimeError):
    pass


@dataclass
class GaussianPosterior:
    """Gaussian belief over arm weights, stored as mean and precision."""

    mu: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.B.shape != (self.dim, self.dim):
            raise ValueError("precision must be d x d")

    @property
    def dim(self) -> int:
        return len(self.mu)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        try:
            L = cholesky(self.B, lower=True)
        except LinAlgError as exc:
            raise PosteriorError("posterior corrupted") from exc
        # B = L L'  =>  L'^{-1} z has covariance B^{-1}
        return self.mu + solve_triangular(L, z, lower=True, trans="T")

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.B)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "B": self.B.ravel().tolist(), "dim": self.dim}

    @classmethod
    def from_dict(cls, data: dict) -> GaussianPosterior:
        d = int(data["dim"])
        return cls(np.asarray(data["mu"], dtype=float), np.asarray(data["B"], dtype=float).reshape(d, d))


def init_cold(d: int) -> GaussianPosterior:
    if d < 1:
        raise ValueError("dimension must be at least 1")
    return GaussianPosterior(np.zeros(d), np.eye(d))


def init_warm_start(estimate: DdlEstimate, mask: Mask, q: int, variance_mode: str = "variance") -> GaussianPosterior:
    """Prior ``N([theta_eff, 0_q], diag([v_eff, 1_q]))`` from offline estimates.

    ``v_eff`` is the squared standard error (``"variance"``) or the standard
    error itself (``"stderr"``).
    """
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
    if mask.p != estimate.p:
        raise ValueError("mask and estimate disagree on p")
    sig = apply_mask(estimate.sigma_hat, mask)
    if not np.all(np.isfinite(sig)):
        raise PosteriorError("cannot warm-start non-identifiable coordinate")
    v = sig**2 if variance_mode == "variance" else sig
    mu = np.concatenate([apply_mask(estimate.theta_hat, mask), np.zeros(q)])
    prior_var = np.concatenate([v, np.ones(q)])
    return GaussianPosterior(mu, np.diag(1.0 / prior_var))


def reduce_context(x, mask: Mask) -> np.ndarray:
    """Keep the selected measured covariates and every hidden-feature entry."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] < mask.p:
        raise ValueError(f"context of length {x.size} cannot carry {mask.p} measured covariates")
    return np.concatenate([x[: mask.p][mask.selected], x[mask.p:]])


@dataclass
class PolicyDecision:
    arm: int
    sampled_scores: np.ndarray


def ts_select(posteriors: list[GaussianPosterior], x_eff_per_arm, rng: np.random.Generator) -> PolicyDecision:
    scores = np.empty(len(posteriors))
    for a, (post, x) in enumerate(zip(posteriors, x_eff_per_arm)):
        if len(x) != post.dim:
            raise ValueError(f"arm {a}: context length {len(x)} != posterior dim {post.dim}")
        scores[a] = post.sample(rng) @ x
    return PolicyDecision(int(np.argmax(scores)), scores)


def posterior_update(posterior: GaussianPosterior, x_eff, y: float) -> GaussianPosterior:
    """Rank-one conjugate update with unit noise variance."""
    x = np.asarray(x_eff, dtype=float)
    if len(x) != posterior.dim:
        raise ValueError("context and posterior dimensions differ")
    B_new = posterior.B + np.outer(x, x)
    rhs = posterior.B @ posterior.mu + x * y
    try:
        mu_new = cho_solve(cho_factor(B_new), rhs)
    except LinAlgError as exc:
        raise PosteriorError("posterior corrupted") from exc
    return GaussianPosterior(mu_new, B_new)


class LinearTS:
    """Per-arm linear Thompson sampling over a (possibly masked) context.

    Each arm keeps its own mask over the ``p`` measured covariates; the ``q``
    trailing hidden features are always used. With full masks and standard
    normal priors this is plain LinTS on all ``p + q`` dimensions.
    """

    def __init__(self, posteriors: list[GaussianPosterior], masks: list[Mask], rng: np.random.Generator):
        if len(posteriors) != len(masks):
            raise ValueError("one mask per arm")
        self.posteriors = list(posteriors)
        self.masks = list(masks)
        self.rng = rng

    @classmethod
    def cold(cls, p: int, q: int, K: int, rng, masks: list[Mask] | None = None) -> LinearTS:
        masks = masks or [Mask.full(p) for _ in range(K)]
        return cls([init_cold(m.p_eff + q) for m in masks], masks, rng)

    @classmethod
    def warm(cls, estimates: list[DdlEstimate], masks: list[Mask], q: int, rng,
             variance_mode: str = "variance") -> LinearTS:
        posts = [init_warm_start(e, m, q, variance_mode) for e, m in zip(estimates, masks)]
        return cls(posts, masks, rng)

    def select(self, x) -> int:
        xs = [reduce_context(x, m) for m in self.masks]
        return ts_select(self.posteriors, xs, self.rng).arm

    def update(self, arm: int, x, y: float) -> None:
        self.posteriors[arm] = posterior_update(self.posteriors[arm], reduce_context(x, self.masks[arm]), y)


def oful_width(d: int, t: int, delta: float, lambda_reg: float, S: float) -> float:
    return float(np.sqrt(lambda_reg) * S + np.sqrt(2 * np.log(1 / delta) + d * np.log(1 + t / (lambda_reg * d))))


@dataclass
class OfulArmState:
    V: np.ndarray
    b: np.ndarray
    t: int = 0


def oful_ucb(state: OfulArmState, x, delta: float, lambda_reg: float, S: float) -> tuple[float, float]:
    """Return ``(theta_tilde' x, upper confidence bound)`` for one arm."""
    x = np.asarray(x, dtype=float)
    cf = cho_factor(state.V)
    theta = cho_solve(cf, state.b)
    width = oful_width(len(x), state.t, delta, lambda_reg, S)
    est = float(theta @ x)
    return est, est + width * float(np.sqrt(max(x @ cho_solve(cf, x), 0.0)))


def oful_select(states: list[OfulArmState], x, delta: float = 0.05, lambda_reg: float = 1.0,
                S: float = 10.0) -> int:
    ucb = [oful_ucb(s, x, delta, lambda_reg, S)[1] for s in states]
    return int(np.argmax(ucb))


class OFUL:
    """Per-arm OFUL with ridge statistics ``V = lambda I + sum x x'`` and ``b = sum x y``."""

    def __init__(self, d: int, K: int, delta: float = 0.05, lambda_reg: float = 1.0, S: float = 10.0):
        if lambda_reg <= 0:
            raise ValueError("lambda_reg must be positive")
        self.states = [OfulArmState(lambda_reg * np.eye(d), np.zeros(d)) for _ in range(K)]
        self.delta, self.lambda_reg, self.S = delta, lambda_reg, S

    def select(self, x) -> int:
        return oful_select(self.states, x, self.delta, self.lambda_reg, self.S)

    def update(self, arm: int, x, y: float) -> None:
        s = self.states[arm]
        x = np.asarray(x, dtype=float)
        s.V = s.V + np.outer(x, x)
        s.b = s.b + x * y
        s.t += 1


def oracle_select(all_params: list[ArmParams], x) -> int:
    return best_arm(all_params, x)[0]


class Oracle:
    def __init__(self, mean_fn):
        # mean_fn(x) -> vector of expected rewards per arm
        self.mean_fn = mean_fn

    def select(self, x) -> int:
        return int(np.argmax(self.mean_fn(x)))

    def update(self, arm: int, x, y: float) -> None:
        pass
