#!/usr/bin/env python3
"""The decision layer: fit the adversarial outcome model, z-score rewards,
train BCQ next to the baseline family, and compare them inside the learned
environment. Reduced scale; expect a few minutes.
"""

import numpy as np

from careloop import cohort, evalkit, outcome, policy, twin

transitions, manifest = cohort.generate_cohort(400, seed=7)
train, val = cohort.split_transitions(transitions, manifest)

# reward normalization is fitted once on the training split and persisted
stats = outcome.compute_reward_stats(train, manifest)
print(f"reward stats: mu={stats.mu:.4f} sigma={stats.sigma:.4f} "
      f"fingerprint={stats.fingerprint}")

out_model, hist = outcome.train_outcome(
    train, val, lambda_adv=0.1, seed=0,
    config=outcome.OutcomeTrainConfig(max_epochs=10))
xv = np.array([t.state for t in val])
av = np.array([t.action for t in val], dtype=np.int64)
yv = np.array([t.reward for t in val])
pred = out_model.predict(xv, av)
r2 = 1 - ((pred - yv) ** 2).sum() / ((yv - yv.mean()) ** 2).sum()
ece, mce = outcome.calibration_report(pred, yv)
print(f"outcome model: held-out R2 {r2:.3f}, ECE {ece:.3f}, MCE {mce:.3f}")

s = np.full(10, 0.5)
s[cohort.FIDX["glucose"]] = 0.9
print("treatment effects vs Placebo at glucose=0.9:")
for a, name in enumerate(cohort.ACTIONS):
    print(f"  {name:8s} {outcome.treatment_effect(out_model, s, a):+.4f}")

# a small twin for evaluation rollouts
members = [twin.train_dynamics(train, val, seed=i,
                               config=twin.TrainConfig(max_epochs=3))[0]
           for i in range(5)]
ens = twin.TwinEnsemble(members)

init_states = np.array([tr.state for tr in val if tr.t == 0][:32])
cfg = policy.PolicyTrainConfig(n_steps=4000, eval_every=1000)
rows = {}
q_bcq, b_bcq, info = policy.train_bcq(train, val, stats, seed=0, config=cfg)
rows["BCQ"] = policy.policy_fn_from("BCQ", q_bcq, b_bcq, info["tau_supp"])
for kind in ("DQN", "CQL"):
    qk, _ = policy.train_baseline(kind, train, val, stats, seed=0, config=cfg)
    rows[kind] = policy.policy_fn_from(kind, qk, None, None)

print(f"\ntwin-environment evaluation ({len(init_states)} episodes, "
      "reduced-scale training):")
print(f"{'method':10s} {'return':>8s} {'sharpe':>7s} {'safety':>7s} {'entropy':>8s}")
for kind, fn in rows.items():
    res = evalkit.evaluate_policy(fn, ens, out_model, stats, init_states)
    print(f"{kind:10s} {res['mean_return']:8.2f} "
          f"{(res['sharpe_like'] or float('nan')):7.2f} "
          f"{res['safety_rate']:7.3f} {res['action_entropy']:8.3f}")
print("\n(the acceptance suite repeats this at full scale with 5 seeds)")
