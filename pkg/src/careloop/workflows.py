"""End-to-end pipeline orchestration over a run directory.

Every stage reads and writes files under one directory, so any stage can be
re-run, inspected, or byte-compared across runs:

    run/
      cohort.jsonl (+ .manifest.json, .raw_records.jsonl)
      deid/clean.jsonl, deid/audit.jsonl
      twin/member_*.ckpt, twin/manifest.json
      outcome.ckpt, reward_stats.json
      policies/<kind>_seed<s>.ckpt, policies/manifest.json
      eval/offline_metrics.json, eval/per_episode.csv
      stream/log.jsonl, stream/metrics.json
      reports/patient_<id>.html
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cohort, deid, evalkit, online, outcome, policy, twin
from .cohort import Transition


def _n_workers() -> int:
    return max(1, int(os.environ.get("CARELOOP_WORKERS", "1")))


@dataclass
class PipelineScale:
    """Knobs that trade fidelity for runtime; defaults match the full workbench."""
    n_patients: int = 2000
    horizon: int = 50
    twin_epochs: int = 12
    twin_members: int = 5
    outcome_epochs: int = 20
    policy_steps: int = 20_000
    nfq_sweeps: int = 40
    n_seeds: int = 5
    eval_episodes: int = 200
    tau_eval_episodes: int = 64

    @staticmethod
    def small() -> "PipelineScale":
        return PipelineScale(n_patients=150, twin_epochs=2, outcome_epochs=4,
                             policy_steps=1200, nfq_sweeps=8, n_seeds=2,
                             eval_episodes=24, tau_eval_episodes=16)


def run_generate(run_dir, n_patients: int, seed: int, horizon: int = 50,
                 with_identifiers: bool = True):
    run_dir = Path(run_dir)
    path = run_dir / "cohort.jsonl"
    transitions, manifest = cohort.generate_cohort(
        n_patients, horizon=horizon, seed=seed, out_path=path,
        with_identifiers=with_identifiers)
    return path, manifest


def run_deid(run_dir, policy_doc: deid.DeidPolicy | None = None,
             raw_path=None, out_path=None, audit_path=None):
    run_dir = Path(run_dir)
    raw_path = Path(raw_path or run_dir / "cohort.jsonl.raw_records.jsonl")
    out_path = Path(out_path or run_dir / "deid" / "clean.jsonl")
    audit_path = Path(audit_path or run_dir / "deid" / "audit.jsonl")
    pol = policy_doc or deid.DeidPolicy(pseudonym_salt="workbench-salt")
    with open(raw_path) as fh:
        raws = [json.loads(line) for line in fh if line.strip()]
    clean, report = deid.deidentify_corpus(raws, pol, audit_path=audit_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for rec in clean:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_path, report


def _load_split(run_dir):
    transitions, manifest = cohort.load_cohort(Path(run_dir) / "cohort.jsonl")
    train, val = cohort.split_transitions(transitions, manifest)
    return transitions, manifest, train, val


def _train_twin_member(run_dir, seed: int, max_epochs: int):
    _, _, train, val = _load_split(run_dir)
    model, hist = twin.train_dynamics(train, val, seed=seed,
                                      config=twin.TrainConfig(max_epochs=max_epochs))
    return model.state_dict(), hist


def run_train_twin(run_dir, scale: PipelineScale, base_seed: int = 0):
    run_dir = Path(run_dir)
    _, _, train, val = _load_split(run_dir)
    config = twin.TrainConfig(max_epochs=scale.twin_epochs)
    seeds = [base_seed + i for i in range(scale.twin_members)]
    members, histories = [], []
    workers = min(_n_workers(), len(seeds))
    if workers > 1:
        # members are independent; per-seed training is a pure function
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_twin_member,
                                    [run_dir] * len(seeds), seeds,
                                    [scale.twin_epochs] * len(seeds)))
        for seed, (state, hist) in zip(seeds, results):
            model = twin.DynamicsModel(seed=seed)
            model.load_state_dict(state)
            members.append(model)
            histories.append(hist)
    else:
        for seed in seeds:
            model, hist = twin.train_dynamics(train, val, seed=seed,
                                              config=config)
            members.append(model)
            histories.append(hist)
    ens = twin.TwinEnsemble(members) if len(members) == twin.ENSEMBLE_SIZE else None
    out_dir = run_dir / "twin"
    if ens is not None:
        twin.save_ensemble(ens, out_dir, histories)
    else:  # reduced-scale runs replicate the first member to fill the ensemble
        full = members + [members[-1]] * (twin.ENSEMBLE_SIZE - len(members))
        twin.save_ensemble(twin.TwinEnsemble(full), out_dir, None)
    return out_dir


def run_train_outcome(run_dir, scale: PipelineScale, lambda_adv: float = 0.1,
                      seed: int = 0):
    run_dir = Path(run_dir)
    _, manifest, train, val = _load_split(run_dir)
    stats = outcome.compute_reward_stats(train, manifest)
    stats.save(run_dir / "reward_stats.json")
    model, hist = outcome.train_outcome(
        train, val, lambda_adv=lambda_adv, seed=seed,
        config=outcome.OutcomeTrainConfig(max_epochs=scale.outcome_epochs))
    outcome.save_outcome(model, run_dir / "outcome.ckpt",
                         {"best_val_mae": hist["best_val_mae"]})
    return run_dir / "outcome.ckpt"


def _val_initial_states(val: list[Transition], limit: int) -> np.ndarray:
    firsts = {}
    for tr in val:
        if tr.t == 0 and tr.patient_id not in firsts:
            firsts[tr.patient_id] = tr.state
    states = [firsts[pid] for pid in sorted(firsts)]
    return np.array(states[:limit])


def make_return_eval_fn(twin_dir, outcome_ckpt, stats, init_states,
                        horizon: int = 50, gamma: float = 0.99):
    ens = twin.load_ensemble(twin_dir)
    out_model = outcome.load_outcome(outcome_ckpt)

    def eval_fn(policy_fn) -> float:
        res = evalkit.evaluate_policy(policy_fn, ens, out_model, stats,
                                      init_states, horizon, gamma)
        return res["mean_return"]
    return eval_fn


def _train_policy_job(run_dir, kind: str, seed: int,
                      cfg: policy.PolicyTrainConfig) -> dict:
    """Train-and-save one (method, seed) cell; pure function of its inputs."""
    run_dir = Path(run_dir)
    _, manifest, train, val = _load_split(run_dir)
    stats = outcome.RewardNormStats.load(run_dir / "reward_stats.json")
    name = f"{kind.lower()}_seed{seed}.ckpt"
    if kind == "BCQ":
        q, b, info = policy.train_bcq(train, val, stats, seed=seed, config=cfg)
        policy.save_policy(run_dir / "policies" / name, q, "BCQ",
                           info["tau_supp"], cfg.gamma, stats.fingerprint,
                           behavior=b)
    else:
        q, info = policy.train_baseline(kind, train, val, stats, seed=seed,
                                        config=cfg)
        policy.save_policy(run_dir / "policies" / name, q, kind, None,
                           cfg.gamma, stats.fingerprint)
    return {"kind": kind, "seed": seed, "file": name,
            "tau_supp": cfg.tau_train if kind == "BCQ" else None}


def run_train_policies(run_dir, scale: PipelineScale,
                       kinds: tuple = ("BCQ",) + policy.BASELINE_KINDS):
    """Train every method under n_seeds seeds; BCQ seeds double as the online
    Q-ensemble. tau_supp is grid-selected once on validation return and
    shared across the BCQ seeds."""
    run_dir = Path(run_dir)
    _, manifest, train, val = _load_split(run_dir)
    stats = outcome.RewardNormStats.load(run_dir / "reward_stats.json")
    pol_dir = run_dir / "policies"
    pol_dir.mkdir(parents=True, exist_ok=True)
    cfg = policy.PolicyTrainConfig(n_steps=scale.policy_steps,
                                   eval_every=max(200, scale.policy_steps // 10),
                                   nfq_sweeps=scale.nfq_sweeps)
    jobs = [(kind, seed) for kind in kinds for seed in range(scale.n_seeds)]
    workers = min(_n_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_train_policy_job, [run_dir] * len(jobs),
                                    [k for k, _ in jobs], [s for _, s in jobs],
                                    [cfg] * len(jobs)))
    else:
        entries = [_train_policy_job(run_dir, k, s, cfg) for k, s in jobs]

    bcq_entries = [e for e in entries if e["kind"] == "BCQ"]
    if bcq_entries:
        tau_states = _val_initial_states(val, scale.tau_eval_episodes)
        eval_fn = make_return_eval_fn(run_dir / "twin", run_dir / "outcome.ckpt",
                                      stats, tau_states, horizon=scale.horizon)
        q0, b0, _ = policy.load_policy(pol_dir / bcq_entries[0]["file"])
        scores = {}
        for tau in policy.TAU_GRID:
            def policy_fn(states, _tau=tau):
                return policy.bcq_actions(states, q0, b0, _tau, cfg.top_n)
            scores[tau] = float(eval_fn(policy_fn))
        best_tau = max(sorted(scores), key=lambda t: scores[t])
        for e in bcq_entries:
            q, b, meta = policy.load_policy(pol_dir / e["file"])
            policy.save_policy(pol_dir / e["file"], q, "BCQ", best_tau,
                               cfg.gamma, stats.fingerprint, behavior=b)
            e["tau_supp"] = best_tau
        tau_info = {"tau_grid_scores": scores, "tau_supp": best_tau}
    else:
        tau_info = {}
    with open(pol_dir / "manifest.json", "w") as fh:
        json.dump({"policies": entries, "n_seeds": scale.n_seeds, **tau_info},
                  fh, indent=2, sort_keys=True)
    return pol_dir


def load_q_ensemble(pol_dir) -> tuple[policy.QEnsemble, policy.BehaviorModel, float]:
    """The online ensemble: the five per-seed BCQ value networks."""
    pol_dir = Path(pol_dir)
    with open(pol_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    bcq_entries = [e for e in manifest["policies"] if e["kind"] == "BCQ"]
    heads, behavior, tau = [], None, 0.1
    for e in bcq_entries:
        q, b, meta = policy.load_policy(pol_dir / e["file"])
        heads.append(q)
        if behavior is None and b is not None:
            behavior = b
            tau = meta.get("tau_supp") or 0.1
    while len(heads) < policy.QEnsemble.H:   # reduced-scale runs
        heads.append(heads[-1])
    return policy.QEnsemble(heads[:policy.QEnsemble.H]), behavior, tau


def run_eval_offline(run_dir, scale: PipelineScale, gamma: float = 0.99):
    """Twin-environment evaluation of every saved policy; Table-style record."""
    run_dir = Path(run_dir)
    _, manifest, train, val = _load_split(run_dir)
    stats = outcome.RewardNormStats.load(run_dir / "reward_stats.json")
    ens = twin.load_ensemble(run_dir / "twin")
    out_model = outcome.load_outcome(run_dir / "outcome.ckpt")
    init_states = _val_initial_states(val, scale.eval_episodes)
    pol_dir = run_dir / "policies"
    with open(pol_dir / "manifest.json") as fh:
        pol_manifest = json.load(fh)
    rows = {}
    episodes = []
    for entry in pol_manifest["policies"]:
        q, b, meta = policy.load_policy(pol_dir / entry["file"])
        fn = policy.policy_fn_from(entry["kind"], q, b, meta.get("tau_supp"))
        res = evalkit.evaluate_policy(fn, ens, out_model, stats, init_states,
                                      horizon=scale.horizon, gamma=gamma)
        rows.setdefault(entry["kind"], []).append(res)
        for ep, ret in enumerate(res["returns"]):
            episodes.append((entry["kind"], entry["seed"], ep, float(ret)))
    table = {}
    for kind, results in rows.items():
        pooled = np.concatenate([r["returns"] for r in results])
        pooled_actions = np.concatenate([r["actions"].reshape(-1) for r in results])
        table[kind] = {
            "mean_return": float(pooled.mean()),
            "std_return": float(pooled.std(ddof=1)),
            "sharpe_like": float(pooled.mean() / pooled.std(ddof=1)),
            "safety_rate": float(np.mean([r["safety_rate"] for r in results])),
            # all aggregates pool episodes across the seeds, entropy included
            "action_entropy": evalkit.action_entropy(pooled_actions),
            "per_seed_entropy": [float(r["action_entropy"]) for r in results],
            "per_seed_mean": [float(r["mean_return"]) for r in results],
            "bootstrap_ci95": list(evalkit.bootstrap_ci(pooled, seed=0)),
        }
    eval_dir = run_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    with open(eval_dir / "offline_metrics.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    with open(eval_dir / "per_episode.csv", "w") as fh:
        fh.write("method,seed,episode,return\n")
        for kind, seed, ep, ret in episodes:
            fh.write(f"{kind},{seed},{ep},{ret}\n")
    return table


def build_stream_loop(run_dir, *, mode: str = "ensemble", tau: float = 0.2,
                      rate_hz: float = 10.0, k: int = 20,
                      expert_mode: str = "simulated", seed: int = 0,
                      log_path=None, with_models: bool = True,
                      single_kind: str = "DQN", single_seed: int = 0):
    run_dir = Path(run_dir)
    stats = outcome.RewardNormStats.load(run_dir / "reward_stats.json")
    ens, behavior, tau_supp = load_q_ensemble(run_dir / "policies")
    twin_ens = twin.load_ensemble(run_dir / "twin") if with_models else None
    out_model = (outcome.load_outcome(run_dir / "outcome.ckpt")
                 if with_models else None)
    hot = online.HotParams(tau=tau, rate_hz=rate_hz)
    if mode == "ensemble":
        kwargs = {"q_ensemble": ens}
    else:
        name = f"{single_kind.lower()}_seed{single_seed}.ckpt"
        q, b, meta = policy.load_policy(run_dir / "policies" / name)
        kwargs = {"q_single": q}
        if mode == "bcq":
            kwargs.update(behavior=b, tau_supp=meta.get("tau_supp") or tau_supp)
    return online.StreamLoop(mode=mode, behavior=behavior, twin_ens=twin_ens,
                             outcome_model=out_model, stats=stats, hot=hot,
                             expert_mode=expert_mode, k_batch=k, seed=seed,
                             log_path=log_path, **kwargs)


def run_stream(run_dir, *, steps: int = 2000, drift_at: int = 1000,
               tau: float = 0.2, rate_hz: float = 10.0, k: int = 20,
               expert_mode: str = "simulated", mode: str = "ensemble",
               paced: bool = True, seed: int = 0, stream_seed: int = 777,
               with_models: bool = True, log_name: str = "log.jsonl",
               single_kind: str = "DQN"):
    run_dir = Path(run_dir)
    stream_dir = run_dir / "stream"
    stream_dir.mkdir(parents=True, exist_ok=True)
    log_path = stream_dir / log_name
    log_path.unlink(missing_ok=True)
    loop = build_stream_loop(run_dir, mode=mode, tau=tau, rate_hz=rate_hz, k=k,
                             expert_mode=expert_mode, seed=seed,
                             log_path=log_path, with_models=with_models,
                             single_kind=single_kind)
    _, manifest, train, val = _load_split(run_dir)
    source = online.replay_then_generate(val, drift_at=drift_at, seed=stream_seed)
    pre_checksums = loop.frozen_checksums()
    snap = loop.run(source, steps, paced=paced)
    snap["frozen_checksums_constant"] = (pre_checksums == loop.frozen_checksums())
    with open(stream_dir / log_name.replace(".jsonl", "_metrics.json"), "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)
    return loop, snap, log_path


def run_full_pipeline(run_dir, scale: PipelineScale, seed: int = 0,
                      stream_steps: int = 300, drift_at: int = 150) -> dict:
    """generate -> deid -> train everything -> unpaced stream -> metric JSON.

    The returned document deliberately excludes wall-clock quantities so two
    runs under one seed are byte-comparable.
    """
    run_dir = Path(run_dir)
    run_generate(run_dir, scale.n_patients, seed, horizon=scale.horizon)
    _, deid_report = run_deid(run_dir)
    run_train_twin(run_dir, scale, base_seed=seed)
    run_train_outcome(run_dir, scale, seed=seed)
    run_train_policies(run_dir, scale, kinds=("BCQ",))
    loop, snap, log_path = run_stream(
        run_dir, steps=stream_steps, drift_at=drift_at, paced=False,
        seed=seed, expert_mode="simulated")
    stream_metrics = evalkit.online_metrics(log_path)
    doc = {
        "seed": seed,
        "deid_classes": len(deid_report.class_sizes),
        "deid_pass": deid_report.ok,
        "stream": {k: stream_metrics[k] for k in
                   ("steps", "query_rate", "updates", "final_buffer",
                    "labels_added", "safety_rate", "forced_queries")},
        "hot": snap["hot"],
        "frozen_constant": snap["frozen_checksums_constant"],
    }
    with open(run_dir / "pipeline_metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def build_patient_report(run_dir, patient_id: int, out_path=None) -> str:
    """Render the HTML report for one cohort patient's current state."""
    run_dir = Path(run_dir)
    transitions, manifest = cohort.load_cohort(run_dir / "cohort.jsonl")
    firsts = {tr.patient_id: tr.state for tr in transitions if tr.t == 0}
    if patient_id not in firsts:
        raise KeyError(f"unknown patient {patient_id}")
    state = firsts[patient_id]
    stats = outcome.RewardNormStats.load(run_dir / "reward_stats.json")
    ens, behavior, tau_supp = load_q_ensemble(run_dir / "policies")
    twin_ens = twin.load_ensemble(run_dir / "twin")
    out_model = outcome.load_outcome(run_dir / "outcome.ckpt")
    stat = online.uncertainty(state, ens)
    action = int(stat.mu.argmax())
    inputs = evalkit.build_report_inputs(
        state, twin_ens=twin_ens, outcome_model=out_model, stats=stats,
        action=action, u_tilde=stat.u_tilde)
    html = evalkit.render_report(state, inputs, patient_id=patient_id)
    out_path = Path(out_path or run_dir / "reports" / f"patient_{patient_id}.html")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(html)
    return html
