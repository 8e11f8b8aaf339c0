"""Replicated regret experiments: offline phase, online rounds, quantile bands, artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deconfound import DdlOptions, Mask, build_mask, choose_kappa_theoretical, ddl_fit
from .policies import OFUL, LinearTS, Oracle, PosteriorError
from .synth import ArmParams, SemConfig, arm_means, build_true_params, generate_dataset

log = logging.getLogger(__name__)

POLICIES = ("DWTS", "LINTS_FULL", "LINTS_TRUE", "OFUL", "ORACLE")
# stable stream keys; never renumber
_POLICY_KEY = {"DWTS": 1, "LINTS_FULL": 2, "LINTS_TRUE": 3, "OFUL": 4, "ORACLE": 5}
_PARAMS, _OFFLINE, _DDL, _CONTEXTS, _NOISE, _POLICY = range(6)

DEFAULT_QUANTILES = (0.1, 0.5, 0.9)


class ReplicationError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    sem: SemConfig
    T: int
    n_replications: int
    policies: list[str] = field(default_factory=lambda: ["DWTS", "LINTS_FULL", "LINTS_TRUE", "OFUL", "ORACLE"])
    alpha: float = 0.05
    kappa_mode: str | dict = "theoretical"  # or {"fixed": value}
    base_seed: int = 0
    output_dir: str = "results"
    p_grid: list[int] | None = None
    share_params: bool = False
    kappa_clamp: bool = True
    variance_mode: str = "variance"
    quantiles: list[float] = field(default_factory=lambda: list(DEFAULT_QUANTILES))
    ddl: dict = field(default_factory=dict)
    oful: dict = field(default_factory=lambda: {"delta": 0.05, "lambda_reg": 1.0, "S": 10.0})

    def __post_init__(self):
        if isinstance(self.sem, dict):
            self.sem = SemConfig.from_dict(self.sem)
        if self.T < 1 or self.n_replications < 1:
            raise ValueError("T and n_replications must be at least 1")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ValueError(f"unknown policies {unknown}; choose from {POLICIES}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.fixed_kappa  # validates kappa_mode
        DdlOptions(**self.ddl)

    @property
    def fixed_kappa(self) -> float | None:
        if self.kappa_mode == "theoretical":
            return None
        if isinstance(self.kappa_mode, dict) and set(self.kappa_mode) == {"fixed"}:
            k = float(self.kappa_mode["fixed"])
            if k < 0:
                raise ValueError("fixed kappa must be nonnegative")
            return k
        raise ValueError(f"kappa_mode must be 'theoretical' or {{'fixed': value}}, got {self.kappa_mode!r}")

    @property
    def grid(self) -> list[int]:
        return list(self.p_grid) if self.p_grid else [self.sem.p]

    def for_p(self, p: int) -> ExperimentConfig:
        return dataclasses.replace(self, sem=dataclasses.replace(self.sem, p=p), p_grid=[p])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sem"] = self.sem.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown ExperimentConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RegretTrace:
    instantaneous: np.ndarray
    policy: str
    replication_id: int
    cumulative: np.ndarray = None

    def __post_init__(self):
        self.instantaneous = np.asarray(self.instantaneous, dtype=float)
        if np.any(self.instantaneous < 0):
            raise ValueError("instantaneous regret must be nonnegative")
        if self.cumulative is None:
            self.cumulative = np.cumsum(self.instantaneous)

    @property
    def T(self) -> int:
        return len(self.instantaneous)


def instantaneous_regret(all_params: list[ArmParams], x, chosen_arm: int) -> float:
    means = arm_means(all_params, x)
    return float(means.max() - means[chosen_arm])


def play(policy, contexts: np.ndarray, means: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Run ``policy`` for ``len(contexts)`` rounds and return per-round pseudo-regret.

    ``means[t, a]`` is the expected reward of arm ``a`` at round ``t`` and
    ``noise[t, a]`` the (already scaled) noise it would receive, so every policy
    run on the same arrays sees the same world.
    """
    T = len(contexts)
    regret = np.empty(T)
    for t in range(T):
        x = contexts[t]
        a = policy.select(x)
        policy.update(a, x, means[t, a] + noise[t, a])
        regret[t] = means[t].max() - means[t, a]
    return regret


def _seed(cfg: ExperimentConfig, rep: int, purpose: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.base_seed, cfg.sem.seed, cfg.sem.p, rep, purpose, *extra])


def _rng(cfg, rep, purpose, *extra) -> np.random.Generator:
    return np.random.default_rng(_seed(cfg, rep, purpose, *extra))


@dataclass
class Environment:
    params: list[ArmParams]
    contexts: np.ndarray
    means: np.ndarray
    noise: np.ndarray
    offline: object


def build_environment(cfg: ExperimentConfig, rep: int) -> Environment:
    sem = cfg.sem
    param_rep = 0 if cfg.share_params else rep
    params = build_true_params(sem, _rng(cfg, param_rep, _PARAMS))
    dataset = generate_dataset(sem, params, _rng(cfg, rep, _OFFLINE))
    contexts = _rng(cfg, rep, _CONTEXTS).standard_normal((cfg.T, sem.p + sem.q))
    W = np.column_stack([pa.weights for pa in params])
    noise = sem.noise_sd * _rng(cfg, rep, _NOISE).standard_normal((cfg.T, sem.K))
    return Environment(params, contexts, contexts @ W, noise, dataset)


def offline_phase(cfg: ExperimentConfig, env: Environment, rep: int):
    """DDL per arm, threshold, masks. Returns ``(estimates, masks, kappa)``."""
    opts = DdlOptions(**cfg.ddl)
    rngs = _rng(cfg, rep, _DDL).spawn(cfg.sem.K)
    estimates = [ddl_fit(Z, y, opts, rng=r) for (Z, y), r in zip(env.offline.blocks, rngs)]
    kappa = cfg.fixed_kappa
    if kappa is None:
        nz = np.concatenate([np.abs(pa.theta_star[pa.theta_star != 0]) for pa in env.params])
        if nz.size == 0:
            raise ReplicationError("theoretical kappa needs at least one nonzero true coefficient")
        kappa = choose_kappa_theoretical(estimates, cfg.alpha, float(nz.min()), cfg.kappa_clamp)
    masks = []
    for e in estimates:
        m = build_mask(e.theta_hat, kappa)
        m.selected[e.degenerate] = False
        masks.append(m)
    return estimates, masks, kappa


def make_policy(label: str, cfg: ExperimentConfig, env: Environment, rep: int, offline=None):
    sem = cfg.sem
    rng = _rng(cfg, rep, _POLICY, _POLICY_KEY[label])
    if label == "ORACLE":
        return RoundOracle(env.means)
    if label == "LINTS_FULL":
        return LinearTS.cold(sem.p, sem.q, sem.K, rng)
    if label == "LINTS_TRUE":
        return LinearTS.cold(sem.p, sem.q, sem.K, rng, [Mask(pa.support) for pa in env.params])
    if label == "OFUL":
        return OFUL(sem.p + sem.q, sem.K, **cfg.oful)
    if label == "DWTS":
        estimates, masks, _ = offline if offline is not None else offline_phase(cfg, env, rep)
        try:
            return LinearTS.warm(estimates, masks, sem.q, rng, cfg.variance_mode)
        except PosteriorError as exc:
            raise ReplicationError(f"replication {rep}: {exc}") from exc
    raise ValueError(f"unknown policy {label!r}")


class RoundOracle(Oracle):
    """Oracle reading the expected-reward table row by row."""

    def __init__(self, means: np.ndarray):
        self._t = 0
        super().__init__(lambda x: means[self._t])

    def update(self, arm, x, y):
        self._t += 1


def run_replication(cfg: ExperimentConfig, policy: str, replication_id: int) -> RegretTrace:
    """One replication of one policy; deterministic in (base_seed, replication_id, policy)."""
    return run_replication_policies(cfg, replication_id, [policy])[policy]


def run_replication_policies(cfg: ExperimentConfig, replication_id: int, policies=None,
                             timings: dict | None = None) -> dict[str, RegretTrace]:
    """All requested policies on one shared environment (common random numbers)."""
    env = build_environment(cfg, replication_id)
    offline = None
    out = {}
    for label in policies or cfg.policies:
        t0 = time.perf_counter()
        if label == "DWTS" and offline is None:
            offline = offline_phase(cfg, env, replication_id)
        pol = make_policy(label, cfg, env, replication_id, offline)
        out[label] = RegretTrace(play(pol, env.contexts, env.means, env.noise), label, replication_id)
        if timings is not None:
            timings[label] = timings.get(label, 0.0) + time.perf_counter() - t0
    return out


@dataclass
class QuantileTable:
    policy: str
    quantiles: list[float]
    values: np.ndarray  # (T, len(quantiles))

    @property
    def rounds(self) -> np.ndarray:
        return np.arange(1, len(self.values) + 1)

    def column(self, q: float) -> np.ndarray:
        return self.values[:, self.quantiles.index(q)]


def aggregate_quantiles(traces: list[RegretTrace], quantiles=DEFAULT_QUANTILES) -> QuantileTable:
    """Per-round quantiles of cumulative regret (linear interpolation between order stats)."""
    if not traces:
        raise ValueError("no traces to aggregate")
    if len({t.policy for t in traces}) != 1 or len({t.T for t in traces}) != 1:
        raise ValueError("traces must share policy and horizon")
    cum = np.stack([t.cumulative for t in traces])
    vals = np.quantile(cum, list(quantiles), axis=0, method="linear").T
    return QuantileTable(traces[0].policy, list(quantiles), vals)


def _qname(q: float) -> str:
    return f"q{round(q * 100):02d}"


def write_results_csv(tables, path, quantiles=DEFAULT_QUANTILES) -> None:
    if isinstance(tables, QuantileTable):
        tables = [tables]
    qs = list(tables[0].quantiles) if tables else list(quantiles)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "round", *map(_qname, qs)])
        for tab in tables:
            for r, row in zip(tab.rounds, tab.values):
                w.writerow([tab.policy, int(r), *(repr(float(v)) for v in row)])


def read_results_csv(path) -> list[QuantileTable]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["policy", "round"]:
            raise ValueError(f"{path}: unexpected header {header}")
        qs = [int(h[1:]) / 100 for h in header[2:]]
        rows: dict[str, list] = {}
        for rec in reader:
            rows.setdefault(rec[0], []).append([float(v) for v in rec[2:]])
    return [QuantileTable(pol, qs, np.array(v).reshape(-1, len(qs))) for pol, v in rows.items()]


POLICY_COLORS = {"DWTS": "tab:blue", "LINTS_FULL": "tab:red", "LINTS_TRUE": "tab:cyan",
                 "OFUL": "black", "ORACLE": "tab:gray"}


def render_regret_svg(tables: list[QuantileTable], path, style: dict | None = None) -> None:
    """Median line plus lower/upper quantile band per policy, written as a deterministic SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    style = style or {}
    colors = {**POLICY_COLORS, **style.get("colors", {})}
    with plt.rc_context({"svg.hashsalt": "dwts", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=style.get("figsize", (5, 3.5)))
        for tab in tables:
            c = colors.get(tab.policy, "tab:purple")
            lo, mid, hi = tab.values[:, 0], tab.values[:, len(tab.quantiles) // 2], tab.values[:, -1]
            ax.fill_between(tab.rounds, lo, hi, color=c, alpha=style.get("band_alpha", 0.2), linewidth=0)
            ax.plot(tab.rounds, mid, color=c, label=tab.policy, linewidth=1.5)
        ax.set_xlabel("round")
        ax.set_ylabel("cumulative regret")
        if style.get("title"):
            ax.set_title(style["title"])
        if tables:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def _replication_job(cfg: ExperimentConfig, rep: int):
    timings: dict[str, float] = {}
    errors: dict[str, str] = {}
    traces: dict[str, RegretTrace] = {}
    for label in cfg.policies:
        try:
            traces.update(run_replication_policies(cfg, rep, [label], timings))
        except (ReplicationError, PosteriorError, ValueError, np.linalg.LinAlgError) as exc:
            errors[label] = f"{type(exc).__name__}: {exc}"
    return rep, traces, timings, errors


def run_cell(cfg: ExperimentConfig, jobs: int = 1):
    """All replications for one ``p``. Returns ``(traces per policy, timings, errors)``."""
    reps = range(cfg.n_replications)
    if jobs == 1:
        results = [_replication_job(cfg, r) for r in reps]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(_replication_job)(cfg, r) for r in reps)
    traces = {label: [] for label in cfg.policies}
    timings = {label: 0.0 for label in cfg.policies}
    errors: dict[str, list[str]] = {}
    for rep, tr, tm, err in sorted(results, key=lambda r: r[0]):
        for label, t in tr.items():
            traces[label].append(t)
        for label, v in tm.items():
            timings[label] += v
        for label, e in err.items():
            errors.setdefault(label, []).append(f"replication {rep}: {e}")
    return traces, timings, errors


def save_traces(traces: dict[str, list[RegretTrace]], path) -> None:
    np.savez_compressed(path, **{k: np.stack([t.instantaneous for t in v]) for k, v in traces.items() if v})


def load_traces(path) -> dict[str, list[RegretTrace]]:
    with np.load(path) as data:
        return {k: [RegretTrace(row, k, i) for i, row in enumerate(data[k])] for k in data.files}


def write_cell_outputs(traces, out: Path, tag: str, quantiles, title: str) -> dict:
    """Per-policy quantile CSVs, one SVG and a raw trace archive for one cell."""
    files = {}
    tables = []
    for label, trs in traces.items():
        if not trs:
            continue
        tab = aggregate_quantiles(trs, quantiles)
        tables.append(tab)
        path = out / f"regret_{tag}_{label}.csv"
        write_results_csv(tab, path)
        files[label] = path.name
    svg = out / f"regret_{tag}.svg"
    render_regret_svg(tables, svg, {"title": title})
    save_traces(traces, out / f"traces_{tag}.npz")
    return {"csv": files, "svg": svg.name, "traces": f"traces_{tag}.npz"}


def run_suite(cfg: ExperimentConfig, jobs: int = 1, out_dir=None) -> dict:
    """Run every ``p`` in the grid and write CSVs, SVGs and ``manifest.json``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config_sha256": cfg.digest(), "config": cfg.to_dict(), "cells": [], "failed": False}
    for p in cfg.grid:
        cell_cfg = cfg.for_p(p)
        log.info("running p=%d (%d replications)", p, cfg.n_replications)
        traces, timings, errors = run_cell(cell_cfg, jobs)
        files = write_cell_outputs(traces, out, f"p{p}", cfg.quantiles, f"p = {p}")
        for label in cfg.policies:
            seeds = [list(map(int, _seed(cell_cfg, r, _POLICY, _POLICY_KEY[label]).entropy))
                     for r in range(cfg.n_replications)]
            cell = {
                "p": p,
                "policy": label,
                "csv": files["csv"].get(label),
                "replications_ok": len(traces[label]),
                "seeds": seeds,
                "wall_clock_s": round(timings[label], 3),
                "errors": errors.get(label, []),
            }
            manifest["failed"] |= bool(cell["errors"])
            manifest["cells"].append(cell)
        manifest.setdefault("svg", []).append(files["svg"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
