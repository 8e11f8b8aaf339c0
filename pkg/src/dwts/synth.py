"""Linear SEM with hidden confounders: offline generator and online reward model.

Offline, for arm ``a`` and each row::

    H ~ N(0, I_q),  E ~ N(0, I_p),  eps ~ N(0, noise_sd^2)
    Z = Psi_a' H + E
    y = theta_a' Z + phi_a' H + eps

Online, the context is ``x = [z; h]`` of length ``p + q`` and the mean reward of
arm ``a`` is ``[theta_a, phi_a]' x``.

Arms are indexed from 0 in the API; files and printed summaries use 1-based labels.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SemConfig:
    p: int
    q: int
    K: int
    p_eff: int
    n_per_arm: int
    noise_sd: float = 1.0
    psi_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p", "q", "K", "p_eff", "n_per_arm"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.p_eff > self.p:
            raise ValueError("p_eff cannot exceed p")
        if not self.noise_sd > 0 or not self.psi_scale > 0:
            raise ValueError("noise_sd and psi_scale must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SemConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown SemConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> SemConfig:
        return cls.from_dict(json.loads(text))


@dataclass
class ArmParams:
    theta_star: np.ndarray  # (p,)
    phi_star: np.ndarray  # (q,)
    psi_star: np.ndarray  # (q, p)

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        self.phi_star = np.asarray(self.phi_star, dtype=float)
        self.psi_star = np.asarray(self.psi_star, dtype=float).reshape(len(self.phi_star), -1)
        if self.psi_star.shape[1] != len(self.theta_star):
            raise ValueError("psi_star must be q x p")
        if not all(np.isfinite(a).all() for a in (self.theta_star, self.phi_star, self.psi_star)):
            raise ValueError("ArmParams entries must be finite")

    @property
    def p(self) -> int:
        return len(self.theta_star)

    @property
    def q(self) -> int:
        return len(self.phi_star)

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.theta_star, self.phi_star])

    @property
    def support(self) -> np.ndarray:
        return self.theta_star != 0


def build_true_params(cfg: SemConfig, rng: np.random.Generator) -> list[ArmParams]:
    """Sparse arm weights ``(a+1)`` on the first ``p_eff`` coordinates (1-based ``a``).

    Each arm draws its ``phi`` and ``Psi`` from its own child stream, so the
    result for arm ``a`` does not depend on how many arms come before it.
    """
    params = []
    for a, child in enumerate(rng.spawn(cfg.K)):
        theta = np.zeros(cfg.p)
        theta[: cfg.p_eff] = a + 2.0
        phi = child.standard_normal(cfg.q)
        psi = cfg.psi_scale * child.standard_normal((cfg.q, cfg.p))
        params.append(ArmParams(theta, phi, psi))
    return params


def generate_offline(params: ArmParams, n_a: int, noise_sd: float, rng: np.random.Generator,
                     p: int | None = None):
    """Draw ``n_a`` confounded rows ``(Z, y)``; the hidden ``H`` and ``E`` are discarded."""
    if n_a < 1:
        raise ValueError("n_a must be at least 1")
    if p is not None and p != params.p:
        raise ValueError(f"params have p={params.p}, requested p={p}")
    H = rng.standard_normal((n_a, params.q))
    E = rng.standard_normal((n_a, params.p))
    eps = noise_sd * rng.standard_normal(n_a)
    Z = H @ params.psi_star + E
    y = Z @ params.theta_star + H @ params.phi_star + eps
    return Z, y


@dataclass
class OfflineDataset:
    blocks: list[tuple[np.ndarray, np.ndarray]]
    arm_ids: list[int]

    def __post_init__(self):
        if len(self.blocks) != len(self.arm_ids):
            raise ValueError("one block per arm id")
        for Z, y in self.blocks:
            if Z.shape[0] != len(y):
                raise ValueError("row count of Z must equal length of y")

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def p(self) -> int:
        return self.blocks[0][0].shape[1]

    def block(self, arm: int):
        return self.blocks[self.arm_ids.index(arm)]

    def to_csv(self, path) -> None:
        p = self.p
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", *[f"z_{i + 1}" for i in range(p)], "y"])
            for arm, (Z, y) in zip(self.arm_ids, self.blocks):
                for row, yi in zip(Z, y):
                    w.writerow([arm + 1, *map(repr, row.tolist()), repr(float(yi))])

    @classmethod
    def from_csv(cls, path) -> OfflineDataset:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[0] != "arm" or header[-1] != "y":
                raise ValueError(f"{path}: header must be arm, z_1..z_p, y")
            p = len(header) - 2
            if header[1:-1] != [f"z_{i + 1}" for i in range(p)]:
                raise ValueError(f"{path}: covariate columns must be z_1..z_{p}")
            rows: dict[int, list[list[float]]] = {}
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != p + 2:
                    raise ValueError(f"{path}:{lineno}: expected {p + 2} fields")
                arm = int(rec[0])
                if arm < 1:
                    raise ValueError(f"{path}:{lineno}: arm labels start at 1")
                rows.setdefault(arm - 1, []).append([float(v) for v in rec[1:]])
        arms = sorted(rows)
        blocks = []
        for a in arms:
            m = np.array(rows[a], dtype=float).reshape(-1, p + 1)
            blocks.append((m[:, :p], m[:, p]))
        return cls(blocks, arms)


def generate_dataset(cfg: SemConfig, params: list[ArmParams], rng: np.random.Generator) -> OfflineDataset:
    blocks = [generate_offline(pa, cfg.n_per_arm, cfg.noise_sd, child, cfg.p)
              for pa, child in zip(params, rng.spawn(cfg.K))]
    return OfflineDataset(blocks, list(range(cfg.K)))


ContextSampler = Callable[[int, np.random.Generator], np.ndarray]


def standard_normal_sampler(dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(dim)


def draw_online_context(p: int, q: int, rng: np.random.Generator,
                        sampler: ContextSampler = standard_normal_sampler) -> np.ndarray:
    """Context ``[z; h]``: measured covariates first, formerly hidden features last."""
    x = np.asarray(sampler(p + q, rng), dtype=float)
    if x.shape != (p + q,):
        raise ValueError(f"sampler returned shape {x.shape}, expected {(p + q,)}")
    return x


def mean_reward(params: ArmParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (params.p + params.q,):
        raise ValueError(f"context has length {x.size}, expected {params.p + params.q}")
    return float(params.theta_star @ x[: params.p] + params.phi_star @ x[params.p:])


def online_reward(params: ArmParams, x, rng: np.random.Generator, noise_sd: float = 1.0) -> float:
    return mean_reward(params, x) + noise_sd * float(rng.standard_normal())


def arm_means(all_params: list[ArmParams], x) -> np.ndarray:
    return np.array([mean_reward(pa, x) for pa in all_params])


def best_arm(all_params: list[ArmParams], x) -> tuple[int, float]:
    """Arm with the largest mean reward; ties go to the lowest index."""
    if not all_params:
        raise ValueError("need at least one arm")
    means = arm_means(all_params, x)
    a = int(np.argmax(means))
    return a, float(means[a])


def save_sem_config(cfg: SemConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")
