from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwts.synth import (ArmParams, OfflineDataset, SemConfig, best_arm, build_true_params, draw_online_context,
                        generate_dataset, generate_offline, mean_reward, online_reward)
from oracles import brute_best, naive_dot


def cfg(**kw):
    base = dict(p=20, q=3, K=2, p_eff=5, n_per_arm=1000)
    base.update(kw)
    return SemConfig(**base)


def test_true_params_arm_values():
    params = build_true_params(cfg(K=3), np.random.default_rng(0))
    np.testing.assert_array_equal(params[0].theta_star, [2.0] * 5 + [0.0] * 15)
    np.testing.assert_array_equal(params[1].theta_star[:5], [3.0] * 5)
    assert params[1].psi_star.shape == (3, 20)


def test_dense_limit():
    pa = build_true_params(cfg(p=5, p_eff=5), np.random.default_rng(0))[0]
    assert pa.support.sum() == 5


def test_arm_params_independent_of_arm_count():
    a = build_true_params(cfg(K=2), np.random.default_rng(9))
    b = build_true_params(cfg(K=4), np.random.default_rng(9))
    np.testing.assert_array_equal(a[1].psi_star, b[1].psi_star)


@pytest.mark.parametrize("bad", [dict(p=0), dict(p_eff=21), dict(noise_sd=0.0), dict(q=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        cfg(**bad)


def test_config_json_round_trip():
    c = cfg(seed=42)
    assert SemConfig.from_json(c.to_json()) == c
    with pytest.raises(ValueError):
        SemConfig.from_dict({**c.to_dict(), "extra": 1})


def test_non_finite_params_rejected():
    with pytest.raises(ValueError):
        ArmParams([np.nan], [0.0], [[0.0]])


def test_unconfounded_noiseless_offline():
    theta = np.r_[1.0, -2.0, 0.0]
    pa = ArmParams(theta, np.zeros(2), np.zeros((2, 3)))
    Z, y = generate_offline(pa, 50, 1e-300, np.random.default_rng(0))
    np.testing.assert_allclose(y, Z @ theta, atol=1e-12)


def test_pure_noise_variance():
    pa = ArmParams(np.zeros(4), np.zeros(2), np.random.default_rng(1).standard_normal((2, 4)))
    _, y = generate_offline(pa, 20000, 2.0, np.random.default_rng(2))
    assert y.var() == pytest.approx(4.0, abs=3 * 4.0 * np.sqrt(2 / 20000))


def test_covariance_matches_population():
    pa = build_true_params(cfg(), np.random.default_rng(3))[0]
    Z, _ = generate_offline(pa, 1000, 1.0, np.random.default_rng(4))
    pop = pa.psi_star.T @ pa.psi_star + np.eye(20)
    emp = Z.T @ Z / 1000
    scale = np.sqrt(np.outer(np.diag(pop), np.diag(pop)))
    # +-0.15 on the correlation scale, which is what the entrywise check is about
    assert np.max(np.abs(emp - pop) / scale) < 0.15


def test_residual_variance_invariant():
    pa = build_true_params(cfg(), np.random.default_rng(5))[0]
    Z, y = generate_offline(pa, 1000, 1.0, np.random.default_rng(6))
    r = y - Z @ pa.theta_star
    target = pa.phi_star @ pa.phi_star + 1.0
    assert abs(r.var() - target) < 3 * target * np.sqrt(2 / 1000)


def test_offline_dimension_mismatch():
    pa = build_true_params(cfg(), np.random.default_rng(0))[0]
    with pytest.raises(ValueError):
        generate_offline(pa, 10, 1.0, np.random.default_rng(0), p=30)


def test_unconfounded_ols_recovers_theta():
    theta = np.r_[np.full(5, 2.0), np.zeros(5)]
    pa = ArmParams(theta, np.zeros(3), np.zeros((3, 10)))
    Z, y = generate_offline(pa, 1000, 1.0, np.random.default_rng(7))
    b, *_ = np.linalg.lstsq(Z, y, rcond=None)
    se = np.sqrt(np.diag(np.linalg.inv(Z.T @ Z)))
    assert np.all(np.abs(b - theta) < 4 * se)


def test_regeneration_bit_identical():
    c = cfg()
    a = generate_dataset(c, build_true_params(c, np.random.default_rng(1)), np.random.default_rng(2))
    b = generate_dataset(c, build_true_params(c, np.random.default_rng(1)), np.random.default_rng(2))
    for (Za, ya), (Zb, yb) in zip(a.blocks, b.blocks):
        assert np.array_equal(Za, Zb) and np.array_equal(ya, yb)


def test_csv_round_trip(tmp_path):
    c = cfg(p=4, p_eff=2, n_per_arm=7)
    ds = generate_dataset(c, build_true_params(c, np.random.default_rng(0)), np.random.default_rng(1))
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    assert path.read_text().splitlines()[0] == "arm,z_1,z_2,z_3,z_4,y"
    back = OfflineDataset.from_csv(path)
    assert back.arm_ids == [0, 1]
    for (Za, ya), (Zb, yb) in zip(ds.blocks, back.blocks):
        assert np.array_equal(Za, Zb) and np.array_equal(ya, yb)


def test_context_shape_and_determinism():
    assert draw_online_context(20, 3, np.random.default_rng(0)).shape == (23,)
    a = draw_online_context(5, 2, np.random.default_rng(8))
    b = draw_online_context(5, 2, np.random.default_rng(8))
    assert np.array_equal(a, b)


def test_context_moments():
    rng = np.random.default_rng(9)
    xs = np.stack([draw_online_context(4, 2, rng) for _ in range(10_000)])
    assert np.all(np.abs(xs.mean(axis=0)) < 0.05)


def test_context_sampler_injection():
    x = draw_online_context(2, 1, np.random.default_rng(0), sampler=lambda d, r: np.ones(d))
    np.testing.assert_array_equal(x, np.ones(3))
    with pytest.raises(ValueError):
        draw_online_context(2, 1, np.random.default_rng(0), sampler=lambda d, r: np.ones(d + 1))


def test_mean_reward_examples():
    pa = ArmParams(np.eye(4)[0], np.zeros(2), np.zeros((2, 4)))
    assert mean_reward(pa, np.zeros(6)) == 0
    assert mean_reward(pa, np.r_[3.0, np.zeros(5)]) == 3.0
    with pytest.raises(ValueError):
        mean_reward(pa, np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_mean_reward_linear_and_matches_naive(seed, a, b):
    rng = np.random.default_rng(seed)
    pa = build_true_params(cfg(p=6, p_eff=3, K=1), rng)[0]
    x1, x2 = rng.standard_normal(9), rng.standard_normal(9)
    assert mean_reward(pa, x1) == pytest.approx(naive_dot(pa.weights, x1), abs=1e-12)
    lhs = mean_reward(pa, a * x1 + b * x2)
    assert lhs == pytest.approx(a * mean_reward(pa, x1) + b * mean_reward(pa, x2), abs=1e-10)


def test_online_reward_noise():
    pa = build_true_params(cfg(p=4, p_eff=2, K=1), np.random.default_rng(0))[0]
    x = np.random.default_rng(1).standard_normal(7)
    m = mean_reward(pa, x)
    assert online_reward(pa, x, np.random.default_rng(2), noise_sd=0.0) == m
    rng = np.random.default_rng(3)
    draws = np.array([online_reward(pa, x, rng) for _ in range(100_000)])
    assert abs(draws.mean() - m) < 0.02
    assert abs(draws.std() - 1.0) < 0.02


def test_best_arm_examples():
    pa = build_true_params(cfg(p=4, p_eff=2, K=1), np.random.default_rng(0))
    x = np.ones(7)
    assert best_arm(pa, x)[0] == 0
    assert best_arm(pa * 3, x)[0] == 0
    rng = np.random.default_rng(4)
    params = build_true_params(cfg(p=6, p_eff=3, K=5), rng)
    for _ in range(50):
        x = rng.standard_normal(9)
        a, v = best_arm(params, x)
        ref = brute_best([p.weights for p in params], x)
        assert a == ref[0] and v == pytest.approx(ref[1], abs=1e-12)
