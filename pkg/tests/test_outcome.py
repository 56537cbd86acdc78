"""Outcome model: reward normalization, treatment effects, calibration,
adversarial deconfounding."""

import numpy as np
import pytest

from careloop import cohort, outcome
from careloop.cohort import PLACEBO
from careloop.outcome import (
    MissingStatsError, OutcomeModel, OutcomeTrainConfig, RewardNormStats,
    calibration_report, compute_reward_stats, denormalize_reward,
    normalize_reward, train_action_probe, train_outcome, treatment_effect,
)


@pytest.fixture(scope="module")
def trained(small_cohort):
    model, hist = train_outcome(
        small_cohort["train"], small_cohort["val"], lambda_adv=0.1, seed=0,
        config=OutcomeTrainConfig(max_epochs=10))
    return model, hist


# -- normalization ---------------------------------------------------------------


def test_normalize_at_mean_and_one_sigma():
    stats = RewardNormStats(mu=2.0, sigma=0.5, fingerprint="x")
    assert normalize_reward(2.0, stats) == 0.0
    assert normalize_reward(2.5, stats) == 1.0


def test_normalized_train_rewards_standardized(small_cohort, small_stats):
    r = np.array([t.reward for t in small_cohort["train"]])
    z = normalize_reward(r, small_stats)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9


def test_normalize_roundtrip(small_stats):
    r = np.linspace(-3, 3, 11)
    back = denormalize_reward(normalize_reward(r, small_stats), small_stats)
    np.testing.assert_allclose(back, r, atol=1e-12)


def test_missing_stats_refused():
    with pytest.raises(MissingStatsError):
        normalize_reward(1.0, None)
    with pytest.raises(MissingStatsError):
        RewardNormStats.load("/nonexistent/stats.json")


def test_stats_persist_byte_identical(tmp_path, small_stats):
    p1, p2 = tmp_path / "s1.json", tmp_path / "s2.json"
    small_stats.save(p1)
    small_stats.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = RewardNormStats.load(p1)
    assert loaded == small_stats


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        RewardNormStats(mu=0.0, sigma=0.0, fingerprint="x")


def test_fingerprint_tracks_split(small_cohort):
    man2 = dict(small_cohort["manifest"])
    man2["splits"] = {"train": man2["splits"]["train"][:-1], "val": []}
    s1 = compute_reward_stats(small_cohort["train"], small_cohort["manifest"])
    s2 = compute_reward_stats(small_cohort["train"], man2)
    assert s1.fingerprint != s2.fingerprint


# -- treatment effect -----------------------------------------------------------------


def test_te_placebo_exactly_zero(trained, rng):
    model, _ = trained
    for _ in range(50):
        s = rng.uniform(0, 1, 10)
        assert treatment_effect(model, s, PLACEBO) == 0.0


def test_te_antisymmetry(trained, rng):
    model, _ = trained
    s = rng.uniform(0, 1, 10)
    for a in range(4):
        te = treatment_effect(model, s, a)
        ra = model.predict(s[None], a)[0]
        rp = model.predict(s[None], PLACEBO)[0]
        assert te == pytest.approx(-(rp - ra), abs=1e-12)


def test_te_prefers_glucose_drug_for_hyperglycemia(trained):
    """Generator oracle: at glucose 0.9, the expected one-step reward of MedA
    beats MedB (an off-target drug), and the learned TE agrees in sign."""
    model, _ = trained
    s = np.full(10, 0.5)
    s[cohort.FIDX["glucose"]] = 0.9
    s[cohort.FIDX["spo2"]] = 0.95

    def expected_reward(a):
        nxt, r, _, _ = cohort.env_step(s, a, rng=None)
        return r

    meda, medb = cohort.ACTIONS.index("MedA"), cohort.ACTIONS.index("MedB")
    assert expected_reward(meda) > expected_reward(medb)
    assert (treatment_effect(model, s, meda) > treatment_effect(model, s, medb))


# -- training ---------------------------------------------------------------------------


def test_lambda_zero_plain_regression(small_cohort):
    cfg = OutcomeTrainConfig(max_epochs=6)
    plain, h_plain = train_outcome(small_cohort["train"], small_cohort["val"],
                                   lambda_adv=0.0, seed=0, config=cfg)
    adv, h_adv = train_outcome(small_cohort["train"], small_cohort["val"],
                               lambda_adv=0.1, seed=0, config=cfg)
    # removing the penalty cannot hurt the fitted objective (small margin)
    assert h_plain["best_val_mae"] <= h_adv["best_val_mae"] + 0.05


def test_negative_lambda_rejected(small_cohort):
    with pytest.raises(ValueError):
        train_outcome(small_cohort["train"][:100], small_cohort["val"][:50],
                      lambda_adv=-1.0)


def test_adversarial_reduces_treatment_leakage(trained, small_cohort):
    model, _ = trained
    train, val = small_cohort["train"], small_cohort["val"]
    xt = np.array([t.state for t in train])
    at = np.array([t.action for t in train], dtype=np.int64)
    xv = np.array([t.state for t in val])
    av = np.array([t.action for t in val], dtype=np.int64)
    acc_z = train_action_probe(model.z_health(xt).data, at,
                               model.z_health(xv).data, av, epochs=12)
    acc_raw = train_action_probe(xt, at, xv, av, epochs=12)
    assert acc_z <= acc_raw + 1e-9


def test_save_load_roundtrip(tmp_path, trained, rng):
    model, _ = trained
    outcome.save_outcome(model, tmp_path / "o.ckpt")
    loaded = outcome.load_outcome(tmp_path / "o.ckpt")
    s = rng.uniform(0, 1, (4, 10))
    a = np.array([0, 1, 2, 4])
    np.testing.assert_array_equal(model.predict(s, a), loaded.predict(s, a))


# -- calibration -----------------------------------------------------------------------


def test_calibration_perfect_predictions():
    y = np.linspace(-1, 1, 100)
    ece, mce = calibration_report(y, y, bins=10)
    assert ece == 0.0 and mce == 0.0


def test_calibration_constant_offset():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0, 1, 500)
    target = pred + 0.25
    ece, mce = calibration_report(pred, target, bins=10)
    assert ece == pytest.approx(0.25, abs=1e-9)
    assert mce == pytest.approx(0.25, abs=1e-9)


def test_calibration_bins_validation():
    with pytest.raises(ValueError):
        calibration_report(np.zeros(4), np.zeros(4), bins=1)


def test_calibration_empty_bins_excluded():
    # predictions cluster at the extremes; middle bins are empty
    pred = np.array([0.0] * 50 + [1.0] * 50)
    target = pred.copy()
    ece, mce = calibration_report(pred, target, bins=10)
    assert ece == 0.0 and mce == 0.0
