"""Semi-synthetic cardiovascular trial: patients, risk models, confounded offline data.

Rewards follow ``rho_a * risk + noise``. Lower risk is better, so the policies
see the negated signal and keep their reward-maximising contract.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, stats

from .deconfound import DdlOptions, Mask, build_mask, ddl_fit
from .harness import (DEFAULT_QUANTILES, POLICIES, RegretTrace, RoundOracle, aggregate_quantiles,
                      play, write_cell_outputs)
from .policies import OFUL, LinearTS
from .synth import OfflineDataset

log = logging.getLogger(__name__)

DEMOGRAPHIC = ("age", "sex", "race_ethnicity")
CLINICAL = ("tobacco_current", "cvd_history", "sbp", "dbp", "bmi", "heart_rate")
BIOMARKERS = ("hba1c", "total_chol", "hdl", "ldl", "triglycerides", "fasting_glucose", "alt",
              "potassium", "serum_creatinine", "urine_creatinine", "albumin_creatinine_ratio")
MEDICATIONS = ("bprx", "statins")
FIELDS = DEMOGRAPHIC + CLINICAL + BIOMARKERS + MEDICATIONS

CATEGORIES = {
    "sex": ("female", "male"),
    "race_ethnicity": ("black_nh", "hispanic", "other", "white_nh"),
}
BOOLEAN_FIELDS = ("tobacco_current", "cvd_history", "bprx", "statins")
NUMERIC_FIELDS = tuple(f for f in FIELDS if f not in CATEGORIES and f not in BOOLEAN_FIELDS)

# Marginals of the NHANES 2009-2018 cohort (n = 28,409): mean and SD, or category shares.
TABLE1 = {
    "continuous": {
        "age": (45.99, 17.24),
        "sbp": (122.98, 18.11),
        "dbp": (70.47, 12.77),
        "bmi": (29.19, 7.21),
        "heart_rate": (79.64, 4.94),
        "hba1c": (5.75, 1.09),
        "total_chol": (189.93, 41.44),
        "hdl": (52.81, 15.86),
        "ldl": (114.46, 42.27),
        "triglycerides": (113.61, 102.61),
        "fasting_glucose": (108.29, 34.78),
        "alt": (24.83, 20.05),
        "potassium": (3.98, 0.34),
        "serum_creatinine": (0.88, 0.44),
        "urine_creatinine": (127.23, 83.75),
        "albumin_creatinine_ratio": (46.96, 648.48),
    },
    "categorical": {
        "sex": {"female": 0.5142, "male": 0.4858},
        "race_ethnicity": {"black_nh": 0.2241, "white_nh": 0.3638, "hispanic": 0.2632, "other": 0.1489},
    },
    "binary": {
        "tobacco_current": 0.5205,
        "cvd_history": 0.0586,
        "bprx": 0.2753,
        "statins": 0.1648,
    },
}


class SchemaError(ValueError):
    pass


@dataclass
class PatientRecord:
    age: float
    sex: str
    race_ethnicity: str
    tobacco_current: bool
    cvd_history: bool
    sbp: float
    dbp: float
    bmi: float
    heart_rate: float
    hba1c: float
    total_chol: float
    hdl: float
    ldl: float
    triglycerides: float
    fasting_glucose: float
    alt: float
    potassium: float
    serum_creatinine: float
    urine_creatinine: float
    albumin_creatinine_ratio: float
    bprx: bool
    statins: bool

    def problems(self) -> list[str]:
        out = []
        for name in NUMERIC_FIELDS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                out.append(f"{name} must be positive, got {v}")
        if self.sbp <= self.dbp:
            out.append(f"sbp ({self.sbp}) must exceed dbp ({self.dbp})")
        for name, cats in CATEGORIES.items():
            if getattr(self, name) not in cats:
                out.append(f"{name} must be one of {cats}, got {getattr(self, name)!r}")
        return out

    def is_valid(self) -> bool:
        return not self.problems()


# ---------------------------------------------------------------------------
# CSV ingestion

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(name: str, text: str):
    if name in BOOLEAN_FIELDS:
        return _parse_bool(text)
    if name in CATEGORIES:
        return text.strip().lower()
    return float(text)


class IngestResult(list):
    """List of records that also carries ``rejected``: (row number, reason) pairs."""

    def __init__(self, records=(), rejected=None):
        super().__init__(records)
        self.rejected: list[tuple[int, str]] = rejected or []


def ingest_csv(path, schema=FIELDS, max_reject_fraction: float = 0.05) -> IngestResult:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [f for f in schema if f not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        records, rejected = [], []
        for rowno, row in enumerate(reader, start=2):
            try:
                values = {f: _parse(f, row[f]) for f in schema}
            except (ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{rowno}: unparseable cell ({exc})") from None
            rec = PatientRecord(**values)
            issues = rec.problems()
            if issues:
                rejected.append((rowno, "; ".join(issues)))
                log.warning("%s:%d rejected: %s", path, rowno, "; ".join(issues))
            else:
                records.append(rec)
    total = len(records) + len(rejected)
    if total and len(rejected) / total > max_reject_fraction:
        raise SchemaError(f"{path}: rejected {len(rejected)} of {total} rows")
    if rejected:
        log.info("%s: %d rows rejected", path, len(rejected))
    return IngestResult(records, rejected)


def _format(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_patients_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow([_format(getattr(r, f)) for f in FIELDS])


# ---------------------------------------------------------------------------
# Synthetic patients


@lru_cache(maxsize=None)
def _marginal(mean: float, sd: float):
    """Positive distribution with the requested mean and SD.

    A normal truncated at zero when its parameters can match both moments;
    otherwise (coefficient of variation too large) a lognormal.
    """
    if sd / mean < 0.95:

        def moments(params):
            loc, log_scale = params
            scale = math.exp(log_scale)
            dist = stats.truncnorm(-loc / scale, np.inf, loc=loc, scale=scale)
            return [dist.mean() / mean - 1, dist.std() / sd - 1]

        sol = optimize.least_squares(moments, [mean, math.log(sd)], xtol=1e-12, ftol=1e-12)
        loc, scale = sol.x[0], math.exp(sol.x[1])
        if max(abs(r) for r in sol.fun) < 1e-6:
            return stats.truncnorm(-loc / scale, np.inf, loc=loc, scale=scale)
    s2 = math.log1p((sd / mean) ** 2)
    return stats.lognorm(s=math.sqrt(s2), scale=mean * math.exp(-s2 / 2))


def synth_patients(n: int, stats_table=TABLE1, rng=None, correlation=None) -> list[PatientRecord]:
    """Draw ``n`` patients from the Table-1 marginals.

    Continuous fields are independent unless ``correlation`` (a matrix over
    ``stats_table["continuous"]`` in key order) couples them through a Gaussian
    copula. Pairs with ``sbp <= dbp`` are redrawn.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng)
    cont = stats_table["continuous"]
    names = list(cont)
    dists = [_marginal(*cont[k]) for k in names]
    L = None if correlation is None else np.linalg.cholesky(np.asarray(correlation, dtype=float))

    def draw(m):
        z = rng.standard_normal((m, len(names)))
        if L is not None:
            z = z @ L.T
        u = np.clip(stats.norm.cdf(z), 1e-12, 1 - 1e-12)
        return np.column_stack([d.ppf(u[:, i]) for i, d in enumerate(dists)])

    values = draw(n)
    si, di = names.index("sbp"), names.index("dbp")
    bad = values[:, si] <= values[:, di]
    while bad.any():
        values[bad] = draw(int(bad.sum()))
        bad = values[:, si] <= values[:, di]

    cats = {}
    for k, shares in stats_table["categorical"].items():
        labels = list(shares)
        probs = np.array([shares[c] for c in labels])
        cats[k] = [labels[i] for i in rng.choice(len(labels), size=n, p=probs / probs.sum())]
    bins = {k: rng.random(n) < p for k, p in stats_table["binary"].items()}

    out = []
    for i in range(n):
        kw = {k: float(values[i, j]) for j, k in enumerate(names)}
        kw.update({k: cats[k][i] for k in cats})
        kw.update({k: bool(bins[k][i]) for k in bins})
        out.append(PatientRecord(**kw))
    return out


# ---------------------------------------------------------------------------
# Risk models

# Surrogate logit weights on standardised inputs; documented in docs/schema.md.
SURROGATE_WEIGHTS = {
    "age": 1.1,
    "sbp": 0.6,
    "smoker": 0.7,
    "diabetic": 0.8,
    "male": 0.4,
    "total_chol": 0.2,
    "hdl": -0.3,
}
SURROGATE_INTERCEPT = -2.6
SURROGATE_FIELDS = ("age", "sex", "sbp", "tobacco_current", "hba1c", "total_chol", "hdl")

PCE_TERMS = (
    "ln_age", "ln_age_sq", "ln_tc", "ln_age_ln_tc", "ln_hdl", "ln_age_ln_hdl",
    "ln_sbp_treated", "ln_age_ln_sbp_treated", "ln_sbp_untreated", "ln_age_ln_sbp_untreated",
    "smoker", "ln_age_smoker", "diabetes",
)
PCE_FIELDS = ("age", "sex", "race_ethnicity", "total_chol", "hdl", "sbp", "bprx", "tobacco_current", "hba1c")


def is_diabetic(p: PatientRecord) -> bool:
    return p.hba1c >= 6.5 or p.fasting_glucose >= 126


def surrogate_features(p: PatientRecord) -> dict[str, float]:
    return {
        "age": (p.age - 46.0) / 17.0,
        "sbp": (p.sbp - 123.0) / 18.0,
        "smoker": float(p.tobacco_current),
        "diabetic": float(p.hba1c >= 6.5),
        "male": float(p.sex == "male"),
        "total_chol": (p.total_chol - 190.0) / 41.0,
        "hdl": (p.hdl - 53.0) / 16.0,
    }


def pce_terms(p: PatientRecord) -> dict[str, float]:
    la = math.log(p.age)
    tr = 1.0 if p.bprx else 0.0
    ls = math.log(p.sbp)
    sm = float(p.tobacco_current)
    return {
        "ln_age": la,
        "ln_age_sq": la * la,
        "ln_tc": math.log(p.total_chol),
        "ln_age_ln_tc": la * math.log(p.total_chol),
        "ln_hdl": math.log(p.hdl),
        "ln_age_ln_hdl": la * math.log(p.hdl),
        "ln_sbp_treated": ls * tr,
        "ln_age_ln_sbp_treated": la * ls * tr,
        "ln_sbp_untreated": ls * (1 - tr),
        "ln_age_ln_sbp_untreated": la * ls * (1 - tr),
        "smoker": sm,
        "ln_age_smoker": la * sm,
        "diabetes": float(is_diabetic(p)),
    }


def stratum(p: PatientRecord) -> str:
    return f"{p.sex}_{'black' if p.race_ethnicity == 'black_nh' else 'white'}"


@dataclass
class RiskModel:
    """Ten-year cardiovascular risk in [0, 1].

    ``logistic_surrogate``: ``sigmoid(w . features + baseline)`` over
    :func:`surrogate_features`. ``coefficient_table``: per-stratum
    ``1 - S0 ** exp(lp - mean_lp)`` with ``lp`` a weighted sum of
    :func:`pce_terms`; ``coefficients`` maps stratum to term weights plus
    ``baseline_survival`` and ``mean_lp``.
    """

    kind: str = "logistic_surrogate"
    coefficients: dict = field(default_factory=lambda: dict(SURROGATE_WEIGHTS))
    baseline: float = SURROGATE_INTERCEPT

    def __post_init__(self):
        if self.kind not in ("logistic_surrogate", "coefficient_table"):
            raise ValueError(f"unknown risk model kind {self.kind!r}")
        if self.kind == "coefficient_table":
            for name, table in self.coefficients.items():
                unknown = set(table) - set(PCE_TERMS) - {"baseline_survival", "mean_lp"}
                if unknown:
                    raise ValueError(f"stratum {name}: unknown terms {sorted(unknown)}")

    @property
    def fields(self) -> tuple[str, ...]:
        return SURROGATE_FIELDS if self.kind == "logistic_surrogate" else PCE_FIELDS

    @classmethod
    def from_table_file(cls, path) -> RiskModel:
        return cls("coefficient_table", json.loads(Path(path).read_text(encoding="utf-8")), 0.0)


def compute_risk(model: RiskModel, patient: PatientRecord) -> float:
    if model.kind == "logistic_surrogate":
        feats = surrogate_features(patient)
        z = model.baseline + sum(w * feats[k] for k, w in model.coefficients.items())
        r = 1.0 / (1.0 + math.exp(-z)) if z > -700 else 0.0
    else:
        key = stratum(patient)
        if key not in model.coefficients:
            raise KeyError(f"missing coefficient entry for stratum {key!r}")
        table = model.coefficients[key]
        for req in ("baseline_survival", "mean_lp"):
            if req not in table:
                raise KeyError(f"stratum {key!r} lacks {req!r}")
        terms = pce_terms(patient)
        lp = sum(v * terms[k] for k, v in table.items() if k in terms)
        r = 1.0 - table["baseline_survival"] ** math.exp(min(lp - table["mean_lp"], 700.0))
    return min(max(r, 1e-6), 1 - 1e-6)


# ---------------------------------------------------------------------------
# Trial environment


@dataclass
class VirtualTrialConfig:
    rho: dict = field(default_factory=lambda: {"NoRx": 1.0, "BPRx": 0.4})
    noise_sd: float = 0.05
    z_features: list = field(default_factory=lambda: list(CLINICAL + BIOMARKERS))
    h_features: list = field(default_factory=lambda: list(DEMOGRAPHIC))
    seed: int = 0
    kappa: float = 0.01
    sbp_threshold: float = 130.0
    offline_fraction: float = 0.5
    n_synthetic: int = 4000
    T: int = 5000
    n_replications: int = 10
    policies: list = field(default_factory=lambda: ["DWTS", "LINTS_FULL", "LINTS_TRUE", "ORACLE"])
    variance_mode: str = "variance"
    ddl: dict = field(default_factory=lambda: {"center": True})
    quantiles: list = field(default_factory=lambda: list(DEFAULT_QUANTILES))

    def __post_init__(self):
        if not self.rho or any(v <= 0 for v in self.rho.values()):
            raise ValueError("rho values must be positive")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be nonnegative")
        overlap = set(self.z_features) & set(self.h_features)
        if overlap:
            raise ValueError(f"z and h features overlap: {sorted(overlap)}")
        unknown = [f for f in [*self.z_features, *self.h_features] if f not in FIELDS]
        if unknown:
            raise ValueError(f"unknown features {unknown}")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ValueError(f"unknown policies {bad}")
        if not 0 < self.offline_fraction < 1:
            raise ValueError("offline_fraction must lie in (0, 1)")
        DdlOptions(**self.ddl)

    @property
    def arms(self) -> list[str]:
        return list(self.rho)

    @classmethod
    def from_dict(cls, data: dict) -> VirtualTrialConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown trial config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def trial_reward(risk: float, arm: str, cfg: VirtualTrialConfig, rng) -> float:
    """Risk after treatment plus Gaussian noise: ``rho_arm * risk + eps``."""
    if arm not in cfg.rho:
        raise KeyError(f"unknown arm {arm!r}")
    eps = cfg.noise_sd * float(rng.standard_normal()) if cfg.noise_sd > 0 else 0.0
    return cfg.rho[arm] * risk + eps


@dataclass
class SbpThresholdRule:
    """Treat when systolic pressure exceeds ``threshold`` (confounded by severity)."""

    threshold: float = 130.0
    treated: str = "BPRx"
    untreated: str = "NoRx"

    def __call__(self, patient: PatientRecord) -> str:
        return self.treated if patient.sbp > self.threshold else self.untreated


def feature_value(patient: PatientRecord, name: str) -> float:
    v = getattr(patient, name)
    if name in CATEGORIES:
        raise ValueError(f"{name} is categorical")
    return float(v)


def build_offline_clinical(patients, risk_model: RiskModel, cfg: VirtualTrialConfig,
                           assignment_rule: Callable[[PatientRecord], str] | None = None,
                           rng=None) -> OfflineDataset:
    """Per-arm blocks of raw ``z_features`` and the policy-facing reward ``-(rho*risk + eps)``.

    Demographic (hidden) features never enter ``Z``. Arm ids follow
    ``cfg.arms`` order.
    """
    if not patients:
        raise ValueError("no patients")
    rng = np.random.default_rng(rng)
    rule = assignment_rule or SbpThresholdRule(cfg.sbp_threshold)
    arms = cfg.arms
    rows: dict[str, list] = {a: [] for a in arms}
    ys: dict[str, list] = {a: [] for a in arms}
    for p in patients:
        a = rule(p)
        if a not in rows:
            raise KeyError(f"assignment rule returned unknown arm {a!r}")
        rows[a].append([feature_value(p, f) for f in cfg.z_features])
        ys[a].append(-trial_reward(compute_risk(risk_model, p), a, cfg, rng))
    starved = [a for a in arms if not rows[a]]
    if starved:
        raise ValueError(f"offline arm starvation: {starved}")
    blocks = [(np.array(rows[a], dtype=float).reshape(-1, len(cfg.z_features)), np.array(ys[a]))
              for a in arms]
    return OfflineDataset(blocks, list(range(len(arms))))


@dataclass
class ContextEncoder:
    """Standardises numeric fields and one-hot encodes categorical ones.

    Constants are frozen at :meth:`fit` time from the offline patients. One-hot
    levels follow alphabetical order and are not standardised.
    """

    z_features: list
    h_features: list
    means: dict = field(default_factory=dict)
    sds: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, patients, z_features, h_features) -> ContextEncoder:
        enc = cls(list(z_features), list(h_features))
        for f in [*z_features, *h_features]:
            if f in CATEGORIES:
                continue
            vals = np.array([float(getattr(p, f)) for p in patients])
            enc.means[f] = float(vals.mean())
            sd = float(vals.std())
            enc.sds[f] = sd if sd > 0 else 1.0
        return enc

    def _names(self, feats):
        out = []
        for f in feats:
            if f in CATEGORIES:
                out.extend(f"{f}={c}" for c in sorted(CATEGORIES[f]))
            else:
                out.append(f)
        return out

    @property
    def z_names(self) -> list[str]:
        return self._names(self.z_features)

    @property
    def h_names(self) -> list[str]:
        return self._names(self.h_features)

    @property
    def p(self) -> int:
        return len(self.z_names)

    @property
    def q(self) -> int:
        return len(self.h_names)

    def _encode(self, patient, feats):
        out = []
        for f in feats:
            v = getattr(patient, f, None)
            if v is None:
                raise ValueError(f"missing feature {f!r}")
            if f in CATEGORIES:
                out.extend(1.0 if v == c else 0.0 for c in sorted(CATEGORIES[f]))
            else:
                out.append((float(v) - self.means[f]) / self.sds[f])
        return out

    def transform_z(self, Z: np.ndarray) -> np.ndarray:
        """Standardise a raw offline block whose columns follow ``z_features``."""
        if any(f in CATEGORIES for f in self.z_features):
            raise ValueError("categorical z features need per-record encoding")
        mu = np.array([self.means[f] for f in self.z_features])
        sd = np.array([self.sds[f] for f in self.z_features])
        return (Z - mu) / sd

    def transform(self, patient) -> np.ndarray:
        return np.array(self._encode(patient, self.z_features) + self._encode(patient, self.h_features))


def patient_to_context(patient: PatientRecord, encoder: ContextEncoder) -> np.ndarray:
    """Context ``[standardised z; encoded h]`` for one patient."""
    return encoder.transform(patient)


@dataclass
class ClinicalResult:
    traces: dict[str, list[RegretTrace]]
    tables: dict
    info: list[dict]


def _rng(seed, rep, purpose):
    return np.random.default_rng(np.random.SeedSequence([seed, rep, purpose]))


def clinical_replication(patients, cfg: VirtualTrialConfig, risk_model: RiskModel, rep: int,
                         policies=None) -> tuple[dict[str, RegretTrace], dict]:
    """One virtual-trial replication of every policy on a shared patient sequence."""
    policies = policies or cfg.policies
    seed = cfg.seed
    n = len(patients)
    perm = _rng(seed, rep, 0).permutation(n)
    n_off = max(int(round(cfg.offline_fraction * n)), 1)
    offline_pts = [patients[i] for i in perm[:n_off]]
    online_pts = [patients[i] for i in perm[n_off:]] or offline_pts

    dataset = build_offline_clinical(offline_pts, risk_model, cfg, None, _rng(seed, rep, 1))
    enc = ContextEncoder.fit(offline_pts, cfg.z_features, cfg.h_features)
    p, q, K = enc.p, enc.q, len(cfg.arms)

    X_pool = np.array([enc.transform(pt) for pt in online_pts])
    risk_pool = np.array([compute_risk(risk_model, pt) for pt in online_pts])
    rho = np.array([cfg.rho[a] for a in cfg.arms])
    idx = _rng(seed, rep, 2).integers(0, len(online_pts), size=cfg.T)
    contexts = X_pool[idx]
    means = -np.outer(risk_pool[idx], rho)
    noise = cfg.noise_sd * _rng(seed, rep, 3).standard_normal((cfg.T, K))

    info = {"replication": rep, "p": p, "q": q}
    out = {}
    for label in policies:
        prng = _rng(seed, rep, 10 + POLICIES.index(label))
        if label == "ORACLE":
            pol = RoundOracle(means)
        elif label == "LINTS_FULL":
            pol = LinearTS.cold(p, q, K, prng)
        elif label == "LINTS_TRUE":
            used = set(risk_model.fields)
            sel = np.array([name.split("=")[0] in used for name in enc.z_names])
            pol = LinearTS.cold(p, q, K, prng, [Mask(sel) for _ in range(K)])
        elif label == "OFUL":
            pol = OFUL(p + q, K)
        else:
            opts = DdlOptions(**cfg.ddl)
            drngs = _rng(seed, rep, 4).spawn(K)
            ests = [ddl_fit(enc.transform_z(Z), y, opts, rng=r)
                    for (Z, y), r in zip(dataset.blocks, drngs)]
            masks = []
            for e in ests:
                m = build_mask(e.theta_hat, cfg.kappa)
                m.selected[e.degenerate] = False
                m.selected[e.nonidentifiable] = False
                masks.append(m)
            info["p_eff"] = [m.p_eff for m in masks]
            pol = LinearTS.warm(ests, masks, q, prng, cfg.variance_mode)
        out[label] = RegretTrace(play(pol, contexts, means, noise), label, rep)
    return out, info


def run_clinical_experiment(cfg: VirtualTrialConfig, patients=None, risk_model: RiskModel | None = None,
                            out_dir=None, jobs: int = 1) -> ClinicalResult:
    """Replicated virtual trial; writes quantile CSVs and an SVG when ``out_dir`` is given."""
    risk_model = risk_model or RiskModel()
    if patients is None:
        patients = synth_patients(cfg.n_synthetic, rng=np.random.SeedSequence([cfg.seed, 2**32]))
    reps = range(cfg.n_replications)
    if jobs == 1:
        results = [clinical_replication(patients, cfg, risk_model, r) for r in reps]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=jobs)(delayed(clinical_replication)(patients, cfg, risk_model, r)
                                        for r in reps)
    traces = {label: [res[0][label] for res in results] for label in cfg.policies}
    tables = {label: aggregate_quantiles(trs, cfg.quantiles) for label, trs in traces.items()}
    info = [res[1] for res in results]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = write_cell_outputs(traces, out, "clinical", cfg.quantiles, "virtual clinical trial")
        manifest = {"config": cfg.to_dict(), "replications": info, "files": files}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return ClinicalResult(traces, tables, info)
