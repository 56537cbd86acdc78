"""Metrics round-trips, stream-log aggregation, importance, HTML report."""

import json

import numpy as np
import pytest

from careloop import cohort, evalkit, outcome
from careloop.evalkit import (
    action_entropy, bootstrap_ci, discounted_return, feature_importance,
    online_metrics, render_report, sharpe_like,
)


def test_discounted_return_hand_value():
    assert discounted_return([1, 1, 1], 0.99) == pytest.approx(2.9701, abs=1e-12)


def test_discounted_return_edge_cases():
    assert discounted_return([], 0.99) == 0.0
    assert discounted_return([7.0, 100.0, 100.0], 0.0) == 7.0
    with pytest.raises(ValueError):
        discounted_return([np.inf], 0.99)


def test_sharpe_like_table_value():
    x = np.array([37.73 - 11.01 / np.sqrt(2), 37.73 + 11.01 / np.sqrt(2)])
    assert x.mean() == pytest.approx(37.73)
    assert x.std(ddof=1) == pytest.approx(11.01)
    assert sharpe_like(x) == pytest.approx(3.427, abs=1e-3)


def test_sharpe_like_two_point():
    assert sharpe_like([0.0, 2.0]) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_sharpe_like_errors():
    with pytest.raises(ValueError):
        sharpe_like([1.0])
    with pytest.raises(ValueError):
        sharpe_like([3.0, 3.0, 3.0])


def test_action_entropy_values():
    assert action_entropy([2] * 50) == 0.0
    uniform = np.repeat(np.arange(5), 20)
    assert action_entropy(uniform) == pytest.approx(np.log(5), abs=1e-12)
    skewed = np.array([0] * 80 + [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5)
    assert action_entropy(skewed) == pytest.approx(0.7777, abs=5e-4)
    with pytest.raises(ValueError):
        action_entropy([])


def test_bootstrap_ci_contains_mean_and_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(10, 2, 200)
    lo1, hi1 = bootstrap_ci(x, seed=1)
    lo2, hi2 = bootstrap_ci(x, seed=1)
    assert (lo1, hi1) == (lo2, hi2)
    assert lo1 < x.mean() < hi1


# -- online_metrics -----------------------------------------------------------------


def _fake_log(n_steps=1000, queried_steps=130, seconds_total=None):
    log = []
    for i in range(n_steps):
        ts = 1000.0 + (i * seconds_total / (n_steps - 1) if seconds_total else i * 0.1)
        log.append({"type": "step", "step": i, "ts": ts, "phase": "replay",
                    "u": 0.1, "proposed": 0, "emitted": 0, "passed": True,
                    "violations": [], "forced": False,
                    "queried": i < queried_steps, "labels": 0,
                    "bl_size": min(i, queried_steps), "bw_size": i,
                    "updates": (min(i, queried_steps)) // 20, "blocks_now": 0,
                    "latency_s": 0.002})
    for i in range(queried_steps):
        log.append({"type": "label", "step": i, "origin_step": i,
                    "provenance": "simulated", "action": 0})
    return log


def test_online_metrics_query_rate():
    m = online_metrics(_fake_log(1000, 130))
    assert m["query_rate"] == pytest.approx(0.130)
    assert m["labels_added"] == 130
    assert m["safety_rate"] == 1.0


def test_online_metrics_throughput():
    m = online_metrics(_fake_log(100, 10, seconds_total=9.9))
    assert m["throughput_hz"] == pytest.approx(10.0, rel=1e-9)


def test_online_metrics_zero_queries_buffer_consistency():
    m = online_metrics(_fake_log(200, 0))
    assert m["final_buffer"] == m["initial_buffer"] == 0
    assert m["labels_added"] == 0


def test_online_metrics_truncated_log_rejected():
    log = _fake_log(50, 5)
    broken = [r for r in log if not (r["type"] == "step" and r["step"] == 20)]
    with pytest.raises(ValueError, match="truncated"):
        online_metrics(broken)


# -- feature importance ------------------------------------------------------------------


def test_feature_importance_ignored_feature_zero():
    rng = np.random.default_rng(0)
    w = rng.normal(0, 1, (10, 5))
    w[3, :] = 0.0   # feature 3 never enters the values

    def q_fn(states):
        return states @ w

    states = rng.uniform(0, 1, (200, 10))
    imp = feature_importance(q_fn, states, seed=0)
    assert imp[cohort.FEATURES[3]] == 0.0
    assert sum(imp.values()) == pytest.approx(100.0, abs=1e-6)


def test_feature_importance_detects_dominant_feature():
    rng = np.random.default_rng(1)
    w = np.zeros((10, 5))
    w[2, :] = [5, 4, 3, 2, 1]   # glucose drives everything

    def q_fn(states):
        return states @ w + 0.01 * states @ rng.normal(0, 1, (10, 5))

    states = rng.uniform(0, 1, (300, 10))
    imp = feature_importance(q_fn, states, seed=0)
    assert max(imp, key=imp.get) == "glucose"


# -- report ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def report_env(small_cohort, small_stats):
    from careloop.twin import DynamicsModel, TwinEnsemble
    twin_ens = TwinEnsemble([DynamicsModel(seed=i) for i in range(5)])
    model, _ = outcome.train_outcome(
        small_cohort["train"][:2000], small_cohort["val"][:500], lambda_adv=0.0,
        config=outcome.OutcomeTrainConfig(max_epochs=2))
    return twin_ens, model


def _inputs(state, report_env, stats, action=0):
    twin_ens, model = report_env
    return evalkit.build_report_inputs(
        state, twin_ens=twin_ens, outcome_model=model, stats=stats,
        action=action, u_tilde=0.15, horizon=5)


def test_report_healthy_profile_no_flags(report_env, small_stats):
    s = np.full(10, 0.5)
    s[cohort.FIDX["spo2"]] = 0.95
    html = render_report(s, _inputs(s, report_env, small_stats), patient_id=7)
    assert 'class="flag-abnormal"' not in html
    assert 'class="flag-low"' not in html
    assert html.count("<tr>") >= 6


def test_report_flags_abnormal_hr_and_names_it(report_env, small_stats):
    s = np.full(10, 0.5)
    s[cohort.FIDX["spo2"]] = 0.95
    s[cohort.FIDX["heart_rate"]] = 0.75
    html = render_report(s, _inputs(s, report_env, small_stats))
    assert 'class="flag-abnormal"' in html
    assert "heart rate" in html  # rationale names the out-of-range vital


def test_report_comparison_lists_all_five(report_env, small_stats):
    s = np.full(10, 0.5)
    inputs = _inputs(s, report_env, small_stats)
    html = render_report(s, inputs)
    for name in cohort.ACTIONS:
        assert name in html
    assert len(inputs["projections"]) == 5


def test_report_deterministic_bytes(report_env, small_stats):
    s = np.full(10, 0.45)
    inputs = _inputs(s, report_env, small_stats, action=2)
    h1 = render_report(s, inputs, patient_id=3)
    h2 = render_report(s, inputs, patient_id=3)
    assert h1 == h2
    assert "<svg" in h1   # inline trajectory sketches present


def test_report_missing_projections_error(report_env, small_stats):
    s = np.full(10, 0.5)
    inputs = _inputs(s, report_env, small_stats)
    inputs["projections"] = {}
    with pytest.raises(ValueError):
        render_report(s, inputs)


def test_report_confidence_is_one_minus_u(report_env, small_stats):
    s = np.full(10, 0.5)
    inputs = _inputs(s, report_env, small_stats)
    assert inputs["confidence"] == pytest.approx(0.85)
    html = render_report(s, inputs)
    assert "0.850" in html
