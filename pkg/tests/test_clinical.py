from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest

from dwts.clinical import (BIOMARKERS, CATEGORIES, CLINICAL, DEMOGRAPHIC, FIELDS, TABLE1, ContextEncoder,
                           PatientRecord, RiskModel, SbpThresholdRule, SchemaError, VirtualTrialConfig, _marginal,
                           build_offline_clinical, compute_risk, ingest_csv, patient_to_context, pce_terms,
                           run_clinical_experiment, synth_patients, trial_reward, write_patients_csv)


@pytest.fixture(scope="module")
def pool():
    return synth_patients(2000, rng=0)


def _with(p: PatientRecord, **kw) -> PatientRecord:
    return dataclasses.replace(p, **kw)


def test_ingest_empty(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text(",".join(FIELDS) + "\n")
    out = ingest_csv(path)
    assert out == [] and out.rejected == []


def test_ingest_round_trip(tmp_path, pool):
    path = tmp_path / "p.csv"
    write_patients_csv(pool[:100], path)
    back = ingest_csv(path)
    assert len(back) == 100 and back == pool[:100]


def test_ingest_rejects_sbp_below_dbp(tmp_path, pool):
    rows = pool[:50] + [_with(pool[50], sbp=70.0, dbp=80.0)]
    path = tmp_path / "p.csv"
    write_patients_csv(rows, path)
    out = ingest_csv(path)
    assert len(out) == 50
    (rowno, reason), = out.rejected
    assert rowno == 52 and "sbp" in reason


def test_ingest_rejection_fraction(tmp_path, pool):
    rows = [_with(p, sbp=50.0, dbp=60.0) for p in pool[:5]] + pool[5:10]
    path = tmp_path / "p.csv"
    write_patients_csv(rows, path)
    with pytest.raises(SchemaError, match="rejected 5 of 10"):
        ingest_csv(path)
    assert len(ingest_csv(path, max_reject_fraction=0.6)) == 5


def test_ingest_missing_column(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("age,sex\n40,female\n")
    with pytest.raises(SchemaError, match="missing columns"):
        ingest_csv(path)


def test_ingest_unparseable_cell(tmp_path, pool):
    path = tmp_path / "p.csv"
    write_patients_csv(pool[:3], path)
    lines = path.read_text().splitlines()
    lines[2] = "abc" + lines[2][lines[2].index(","):]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match=":3:"):
        ingest_csv(path)


def test_synth_calibration():
    pts = synth_patients(10_000, rng=1)
    assert abs(np.mean([p.age for p in pts]) - 45.99) <= 0.6
    assert abs(np.mean([p.bprx for p in pts]) - 0.2753) <= 0.015
    assert all(p.is_valid() for p in pts)


def test_synth_marginals_match_moments():
    for name, (m, s) in TABLE1["continuous"].items():
        d = _marginal(m, s)
        assert d.mean() == pytest.approx(m, rel=1e-4), name
        assert d.std() == pytest.approx(s, rel=1e-4), name


def test_synth_correlation_hook():
    k = len(TABLE1["continuous"])
    names = list(TABLE1["continuous"])
    C = np.eye(k)
    i, j = names.index("total_chol"), names.index("ldl")
    C[i, j] = C[j, i] = 0.8
    pts = synth_patients(3000, rng=2, correlation=C)
    r = np.corrcoef([p.total_chol for p in pts], [p.ldl for p in pts])[0, 1]
    assert r > 0.6
    with pytest.raises(ValueError):
        synth_patients(0)


def test_surrogate_examples(pool):
    flat = RiskModel("logistic_surrogate", {k: 0.0 for k in RiskModel().coefficients}, 0.0)
    assert compute_risk(flat, pool[0]) == 0.5
    m = RiskModel()
    assert compute_risk(m, _with(pool[0], sbp=160.0, dbp=80.0)) > compute_risk(m, _with(pool[0], sbp=110.0, dbp=80.0))


def test_risk_in_unit_interval():
    pts = synth_patients(100_000, rng=3)
    m = RiskModel()
    r = np.array([compute_risk(m, p) for p in pts])
    assert r.min() >= 1e-6 and r.max() <= 1 - 1e-6
    extreme = RiskModel("logistic_surrogate", {"age": 1e4}, 0.0)
    assert compute_risk(extreme, pts[0]) in (1e-6, 1 - 1e-6)


def _table():
    strata = {}
    for sex in ("female", "male"):
        for race in ("white", "black"):
            strata[f"{sex}_{race}"] = {"ln_age": 2.0, "ln_sbp_untreated": 1.5, "ln_sbp_treated": 1.7,
                                       "smoker": 0.5, "diabetes": 0.6, "baseline_survival": 0.95, "mean_lp": 15.0}
    return strata


def test_coefficient_table_hand_computed(pool):
    m = RiskModel("coefficient_table", _table(), 0.0)
    p = _with(pool[0], age=50.0, sbp=140.0, bprx=False, tobacco_current=True, hba1c=5.0, fasting_glucose=90.0)
    lp = 2.0 * math.log(50) + 1.5 * math.log(140) + 0.5
    assert compute_risk(m, p) == pytest.approx(1 - 0.95 ** math.exp(lp - 15.0), rel=1e-12)
    assert pce_terms(p)["ln_sbp_treated"] == 0


def test_coefficient_table_missing_stratum(pool, tmp_path):
    t = _table()
    del t["male_black"]
    path = tmp_path / "pce.json"
    path.write_text(json.dumps(t))
    m = RiskModel.from_table_file(path)
    p = _with(pool[0], sex="male", race_ethnicity="black_nh")
    with pytest.raises(KeyError, match="missing coefficient entry"):
        compute_risk(m, p)
    with pytest.raises(ValueError, match="unknown terms"):
        RiskModel("coefficient_table", {"female_white": {"ln_weight": 1.0}}, 0.0)


def test_trial_reward_examples():
    cfg = VirtualTrialConfig(noise_sd=0.0)
    rng = np.random.default_rng(0)
    assert trial_reward(0.3, "NoRx", cfg, rng) == pytest.approx(0.3)
    assert trial_reward(0.3, "BPRx", cfg, rng) == pytest.approx(0.12)
    with pytest.raises(KeyError):
        trial_reward(0.3, "Statin", cfg, rng)
    cfg = VirtualTrialConfig(noise_sd=0.1)
    draws = np.array([trial_reward(0.3, "BPRx", cfg, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.12) <= 3 * 0.1 / math.sqrt(100_000)


def test_zero_noise_ratio(pool):
    cfg = VirtualTrialConfig(noise_sd=0.0)
    rng = np.random.default_rng(0)
    for p in pool[:20]:
        r = compute_risk(RiskModel(), p)
        assert trial_reward(r, "BPRx", cfg, rng) == pytest.approx(0.4 * trial_reward(r, "NoRx", cfg, rng))


def test_offline_starvation(pool):
    cfg = VirtualTrialConfig(sbp_threshold=1.0)
    with pytest.raises(ValueError, match="offline arm starvation"):
        build_offline_clinical(pool[:50], RiskModel(), cfg, rng=0)
    with pytest.raises(ValueError):
        build_offline_clinical([], RiskModel(), cfg, rng=0)


def test_offline_median_split_and_shape(pool):
    med = float(np.median([p.sbp for p in pool]))
    cfg = VirtualTrialConfig()
    ds = build_offline_clinical(pool, RiskModel(), cfg, SbpThresholdRule(med), rng=1)
    n_no, n_bp = (len(y) for _, y in ds.blocks)
    assert abs(n_no - n_bp) <= 2
    assert all(Z.shape[1] == len(cfg.z_features) for Z, _ in ds.blocks)
    again = build_offline_clinical(pool, RiskModel(), cfg, SbpThresholdRule(med), rng=1)
    for (Za, ya), (Zb, yb) in zip(ds.blocks, again.blocks):
        assert np.array_equal(Za, Zb) and np.array_equal(ya, yb)


def test_offline_excludes_hidden(pool):
    cfg = VirtualTrialConfig()
    assert not set(cfg.z_features) & set(DEMOGRAPHIC)
    ds = build_offline_clinical(pool[:300], RiskModel(), cfg, rng=0)
    Z, _ = ds.blocks[0]
    ages = {p.age for p in pool[:300]}
    assert not any(v in ages for v in Z.ravel())


def test_trial_config_validation():
    with pytest.raises(ValueError):
        VirtualTrialConfig(rho={"NoRx": 1.0, "BPRx": 0.0})
    with pytest.raises(ValueError):
        VirtualTrialConfig(z_features=["age", "sbp"])
    with pytest.raises(ValueError):
        VirtualTrialConfig.from_dict({"nope": 1})


def test_encoder(pool):
    enc = ContextEncoder.fit(pool, list(CLINICAL + BIOMARKERS), list(DEMOGRAPHIC))
    assert enc.p == len(CLINICAL + BIOMARKERS)
    assert enc.q == 1 + len(CATEGORIES["sex"]) + len(CATEGORIES["race_ethnicity"])
    assert enc.h_names[1:3] == ["sex=female", "sex=male"]
    mean_rec = dataclasses.replace(pool[0], **{f: enc.means[f] for f in CLINICAL + BIOMARKERS})
    x = patient_to_context(mean_rec, enc)
    np.testing.assert_allclose(x[: enc.p], 0.0, atol=1e-12)
    assert x.shape == (enc.p + enc.q,)
    for p in pool[:50]:
        h = patient_to_context(p, enc)[enc.p:]
        assert h[1:3].sum() == 1 and h[3:].sum() == 1


def test_encoder_injective(pool):
    enc = ContextEncoder.fit(pool, list(CLINICAL + BIOMARKERS), list(DEMOGRAPHIC))
    X = np.array([patient_to_context(p, enc) for p in pool[:500]])
    assert len({tuple(r) for r in X}) == 500


def test_clinical_oracle_zero(tmp_path, pool):
    cfg = VirtualTrialConfig(T=60, n_replications=2, policies=["DWTS", "LINTS_TRUE", "ORACLE"])
    res = run_clinical_experiment(cfg, pool[:600], out_dir=tmp_path)
    assert all(np.all(t.cumulative == 0) for t in res.traces["ORACLE"])
    assert res.traces["DWTS"][0].T == 60
    assert (tmp_path / "regret_clinical_DWTS.csv").exists()
    assert (tmp_path / "manifest.json").exists()
