#!/usr/bin/env python3
"""Render the HTML decision-support report for one synthetic patient: vital
flags from the safety-gate ranges, the recommended treatment with confidence,
projected returns for all five plans, and inline trajectory sketches.
"""

import tempfile
import webbrowser
from pathlib import Path

import numpy as np

from careloop import cohort, evalkit, online, outcome, policy, twin

transitions, manifest = cohort.generate_cohort(250, seed=5)
train, val = cohort.split_transitions(transitions, manifest)
stats = outcome.compute_reward_stats(train, manifest)

print("fitting reduced-scale models...")
out_model, _ = outcome.train_outcome(
    train, val, lambda_adv=0.1, config=outcome.OutcomeTrainConfig(max_epochs=8))
members = [twin.train_dynamics(train, val, seed=i,
                               config=twin.TrainConfig(max_epochs=3))[0]
           for i in range(5)]
twin_ens = twin.TwinEnsemble(members)
heads = []
for seed in range(5):
    q, b, _ = policy.train_bcq(train, val, stats, seed=seed,
                               config=policy.PolicyTrainConfig(n_steps=2500,
                                                               eval_every=1000))
    heads.append(q)
q_ens = policy.QEnsemble(heads)

# pick a patient with an out-of-range vital so the rationale has something to say
state = np.full(10, 0.5)
state[cohort.FIDX["glucose"]] = 0.82
state[cohort.FIDX["spo2"]] = 0.93
state[cohort.FIDX["age"]] = 0.61

stat = online.uncertainty(state, q_ens)
action = int(stat.mu.argmax())
print(f"recommended action: {cohort.ACTIONS[action]} "
      f"(uncertainty {stat.u_tilde:.3f} -> confidence {1 - stat.u_tilde:.3f})")

inputs = evalkit.build_report_inputs(state, twin_ens=twin_ens,
                                     outcome_model=out_model, stats=stats,
                                     action=action, u_tilde=stat.u_tilde)
html = evalkit.render_report(state, inputs, patient_id="demo-001")
out = Path(tempfile.mkdtemp(prefix="careloop_report_")) / "patient_demo-001.html"
out.write_text(html)
print(f"wrote {out} ({len(html)} bytes)")
print("projected discounted returns per plan:")
for a, name in enumerate(cohort.ACTIONS):
    marker = " <- recommended" if a == action else ""
    print(f"  {name:8s} {inputs['projections'][a]:+.3f}{marker}")
try:
    webbrowser.open(out.as_uri())
except Exception:
    pass
