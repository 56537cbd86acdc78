"""Metrics and reporting: returns, stability, entropy, stream metrics,
fidelity panels, permutation feature importance, and the HTML patient report.

Everything here is a pure function of logged series or frozen models, so any
aggregate can be recomputed independently in tests.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jinja2
import numpy as np

from .cohort import ACTIONS, FEATURES, FIDX, N_ACTIONS, PLACEBO
from .outcome import normalize_reward, treatment_effect
from .safety import RULES, proposal_passes, range_flags
from .twin import rollout_batch


def discounted_return(rewards, gamma: float = 0.99) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return 0.0
    if not np.isfinite(rewards).all():
        raise ValueError("rewards must be finite")
    return float((rewards * gamma ** np.arange(len(rewards))).sum())


def sharpe_like(returns) -> float:
    returns = np.asarray(returns, dtype=np.float64)
    if len(returns) < 2:
        raise ValueError("need at least two episodes")
    std = returns.std(ddof=1)
    if std == 0:
        raise ValueError("zero standard deviation across episodes")
    return float(returns.mean() / std)


def action_entropy(actions) -> float:
    """Shannon entropy (nats) of the empirical action distribution."""
    actions = np.asarray(actions).reshape(-1)
    if actions.size == 0:
        raise ValueError("empty action series")
    counts = np.bincount(actions.astype(np.int64), minlength=N_ACTIONS)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -(p * np.log(p)).sum()))


def bootstrap_ci(returns, n_resamples: int = 10_000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean return."""
    returns = np.asarray(returns, dtype=np.float64)
    rng = np.random.default_rng([seed, 0xB00])
    idx = rng.integers(0, len(returns), size=(n_resamples, len(returns)))
    means = returns[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return (float(np.quantile(means, alpha)), float(np.quantile(means, 1 - alpha)))


# -- twin-environment policy evaluation ----------------------------------------


def evaluate_policy(policy_fn, twin_ens, outcome_model, stats, init_states,
                    horizon: int = 50, gamma: float = 0.99) -> dict:
    """Roll the policy in the learned environment and score it.

    Safety is the pre-substitution rate: the fraction of proposals free of
    action-attributable gate blocks (contraindications, critical-oxygen
    overrides). The gate does not intervene here; offline evaluation
    measures what the policy would have asked for.
    """
    init_states = np.atleast_2d(np.asarray(init_states, dtype=np.float64))

    def reward_fn(states, acts):
        return normalize_reward(outcome_model.predict(states, acts), stats)

    out = rollout_batch(twin_ens, reward_fn, policy_fn, init_states, horizon)
    disc = gamma ** np.arange(horizon)
    returns = (out["rewards"] * disc).sum(axis=1)
    states_flat = out["states"][:, :-1, :].reshape(-1, init_states.shape[1])
    actions_flat = out["actions"].reshape(-1)
    passes = np.fromiter(
        (proposal_passes(s, a) for s, a in zip(states_flat, actions_flat)),
        dtype=bool, count=len(actions_flat))
    return {
        "returns": returns,
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std(ddof=1)) if len(returns) > 1 else 0.0,
        "sharpe_like": sharpe_like(returns) if len(returns) > 1 and
                       returns.std(ddof=1) > 0 else None,
        "safety_rate": float(passes.mean()),
        "action_entropy": action_entropy(actions_flat),
        "action_histogram": np.bincount(actions_flat, minlength=N_ACTIONS).tolist(),
        "actions": out["actions"],
        "variances": out["variances"],
    }


# -- stream-log metrics ------------------------------------------------------------


def load_stream_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def online_metrics(log: list[dict] | str | Path) -> dict:
    """Table-shaped summary of one stream run, recomputed from raw records."""
    if isinstance(log, (str, Path)):
        log = load_stream_log(log)
    steps = [r for r in log if r.get("type") == "step"]
    labels = [r for r in log if r.get("type") == "label"]
    if not steps:
        raise ValueError("log contains no step records")
    expected = steps[-1]["step"] - steps[0]["step"] + 1
    if len(steps) != expected:
        raise ValueError(f"truncated log: {len(steps)} records for {expected} steps")
    n = len(steps)
    queried_steps = {r["origin_step"] for r in labels}
    emitted_ok = sum(1 for r in steps
                     if r["passed"] or r["emitted"] == PLACEBO)
    ts = [r["ts"] for r in steps]
    throughput = (n - 1) / (ts[-1] - ts[0]) if n > 1 and ts[-1] > ts[0] else None
    initial_buffer = steps[0]["bl_size"] - (1 if steps[0]["step"] in queried_steps
                                            and steps[0]["bl_size"] else 0)
    return {
        "steps": n,
        "query_rate": len(queried_steps) / n,
        "response_time_s": float(np.mean([r["latency_s"] for r in steps])),
        "throughput_hz": throughput,
        "safety_rate": emitted_ok / n,
        "updates": steps[-1]["updates"],
        "final_buffer": steps[-1]["bl_size"],
        "initial_buffer": max(0, initial_buffer),
        "labels_added": len(labels),
        "provenance_counts": _count(r["provenance"] for r in labels),
        "forced_queries": sum(1 for r in steps if r["forced"]),
    }


def _count(items) -> dict:
    out: dict[str, int] = {}
    for it in items:
        out[it] = out.get(it, 0) + 1
    return out


# -- feature importance ---------------------------------------------------------------


def feature_importance(q_fn, states: np.ndarray, seed: int = 0,
                       action_fn=None) -> dict[str, float]:
    """Permutation importance as percentages summing to 100.

    For each feature, shuffle that column across states and measure the mean
    absolute change of the chosen action's value.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) < 2:
        raise ValueError("need at least two states to permute")
    rng = np.random.default_rng([seed, 0xF1])
    base_q = np.atleast_2d(q_fn(states))
    chosen = (np.asarray(action_fn(states)) if action_fn is not None
              else base_q.argmax(axis=1))
    rows = np.arange(len(states))
    base_vals = base_q[rows, chosen]
    raw = np.zeros(states.shape[1])
    for j in range(states.shape[1]):
        shuffled = states.copy()
        shuffled[:, j] = shuffled[rng.permutation(len(states)), j]
        vals = np.atleast_2d(q_fn(shuffled))[rows, chosen]
        raw[j] = np.abs(vals - base_vals).mean()
    total = raw.sum()
    pct = raw / total * 100.0 if total > 0 else np.full(len(raw), 100.0 / len(raw))
    return {FEATURES[j]: float(pct[j]) for j in range(states.shape[1])}


# -- the HTML patient report -------------------------------------------------------------


_TEMPLATE = None


def _template() -> jinja2.Template:
    global _TEMPLATE
    if _TEMPLATE is None:
        text = resources.files("careloop.data").joinpath(
            "report_template.html").read_text()
        _TEMPLATE = jinja2.Environment(
            autoescape=False, trim_blocks=True, lstrip_blocks=True,
            undefined=jinja2.StrictUndefined).from_string(text)
    return _TEMPLATE


def _svg_sparkline(name: str, series: list[float], width=220, height=64) -> str:
    lo, hi = 0.0, 1.0
    n = len(series)
    pts = []
    for i, v in enumerate(series):
        x = 8 + i * (width - 16) / max(n - 1, 1)
        y = height - 14 - (min(max(v, lo), hi) - lo) / (hi - lo) * (height - 24)
        pts.append(f"{x:.2f},{y:.2f}")
    path = " ".join(pts)
    return (f'<svg class="sketch" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" xmlns="http://www.w3.org/2000/svg">'
            f'<text x="8" y="10">{name}</text>'
            f'<polyline fill="none" stroke="#2b6777" stroke-width="1.5" '
            f'points="{path}"/></svg>')


KEY_BIOMARKERS = ["blood_pressure", "heart_rate", "glucose", "spo2", "temperature"]


def build_report_inputs(state: np.ndarray, *, twin_ens, outcome_model, stats,
                        action: int, u_tilde: float, horizon: int = 10,
                        gamma: float = 0.99) -> dict:
    """Compute every quantity the report renders: projections for all five
    treatments (constant-plan rollouts in the twin), immediate outcomes,
    treatment effects, and the biomarker trajectories under the chosen plan."""
    state = np.asarray(state, dtype=np.float64)
    projections: dict[int, float] = {}
    trajectories = None
    for a in range(N_ACTIONS):
        def policy_fn(states, _a=a):
            return np.full(len(states), _a, dtype=np.int64)

        def reward_fn(states, acts):
            return normalize_reward(outcome_model.predict(states, acts), stats)

        out = rollout_batch(twin_ens, reward_fn, policy_fn, state[None], horizon)
        projections[a] = discounted_return(out["rewards"][0], gamma)
        if a == action:
            trajectories = {name: out["states"][0, :, FIDX[name]].tolist()
                            for name in KEY_BIOMARKERS}
    immediate = {a: float(normalize_reward(
        outcome_model.predict(state[None], np.array([a]))[0], stats))
        for a in range(N_ACTIONS)}
    te = {a: treatment_effect(outcome_model, state, a) for a in range(N_ACTIONS)}
    return {
        "action": action,
        "confidence": 1.0 - u_tilde,
        "projections": projections,
        "immediate": immediate,
        "treatment_effects": te,
        "trajectories": trajectories,
        "horizon": horizon,
    }


def render_report(state: np.ndarray, inputs: dict, patient_id="unknown") -> str:
    """Deterministic HTML document; identical inputs give identical bytes."""
    state = np.asarray(state, dtype=np.float64)
    if not inputs.get("projections"):
        raise ValueError("projections are required to render a report")
    flags = range_flags(state)
    profile = []
    for name in FEATURES:
        profile.append({
            "label": name.replace("_", " "),
            "value": f"{state[FIDX[name]]:.3f}",
            "flag": flags.get(name, "normal"),
        })
    action = inputs["action"]
    recommendation = {
        "action_name": ACTIONS[action],
        "confidence": f"{inputs['confidence']:.3f}",
        "expected_outcome": f"{inputs['immediate'][action]:+.3f}",
    }
    best = max(inputs["projections"], key=lambda a: inputs["projections"][a])
    comparison = [{
        "action_name": ACTIONS[a],
        "projected_return": f"{inputs['projections'][a]:+.3f}",
        "immediate": f"{inputs['immediate'][a]:+.3f}",
        "te": f"{inputs['treatment_effects'][a]:+.4f}",
        "best": a == best,
    } for a in range(N_ACTIONS)]
    out_of_range = [name for name, f in flags.items() if f != "normal"]
    lines = []
    for name in out_of_range:
        lo, hi = RULES["vital_ranges"][name]
        lines.append(f"{name.replace('_', ' ')} is {flags[name]} at "
                     f"{state[FIDX[name]]:.3f} (reference range {lo}-{hi}).")
    alt = sorted((a for a in range(N_ACTIONS) if a != action),
                 key=lambda a: -inputs["projections"][a])[0]
    gap = inputs["treatment_effects"][action] - inputs["treatment_effects"][alt]
    lines.append(
        f"Estimated treatment effect of {ACTIONS[action]} exceeds the best "
        f"alternative ({ACTIONS[alt]}) by {gap:+.4f} in immediate outcome units."
        if gap >= 0 else
        f"{ACTIONS[action]} trails {ACTIONS[alt]} by {-gap:.4f} in estimated "
        f"treatment effect but is preferred on projected return or safety.")
    summary = ("All monitored vitals are within the configured reference ranges."
               if not out_of_range else
               f"{len(out_of_range)} vital(s) outside reference ranges drive "
               f"this recommendation: {', '.join(n.replace('_', ' ') for n in out_of_range)}.")
    sketches = [_svg_sparkline(name.replace("_", " "), series)
                for name, series in (inputs["trajectories"] or {}).items()]
    return _template().render(
        patient_id=patient_id, profile=profile, recommendation=recommendation,
        comparison=comparison, horizon=inputs["horizon"],
        reference_name=ACTIONS[PLACEBO],
        rationale={"summary": summary, "lines": lines}, sketches=sketches)
