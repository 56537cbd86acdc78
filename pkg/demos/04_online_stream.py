#!/usr/bin/env python3
"""The online loop end to end, at reduced scale: quick offline initialization,
then a 600-step stream that switches to an age-shifted generator halfway.
Watch the query rate, the safety substitutions, the k-center batches, and a
live hot-parameter change.
"""

import numpy as np

from careloop import cohort, evalkit, online, outcome, policy
from careloop.online import HotParams, StreamLoop, replay_then_generate

transitions, manifest = cohort.generate_cohort(300, seed=9)
train, val = cohort.split_transitions(transitions, manifest)
stats = outcome.compute_reward_stats(train, manifest)

print("training 5 Q-heads (reduced scale)...")
cfg = policy.PolicyTrainConfig(n_steps=3000, eval_every=1000)
heads, behavior = [], None
for seed in range(5):
    q, behavior, _ = policy.train_bcq(train, val, stats, seed=seed, config=cfg)
    heads.append(q)
ens = policy.QEnsemble(heads)

loop = StreamLoop(mode="ensemble", q_ensemble=ens, behavior=behavior,
                  stats=stats, hot=HotParams(tau=0.2), k_batch=20, seed=0,
                  expert_mode="simulated")
source = replay_then_generate(val, drift_at=300, seed=77)

print("streaming 600 steps (drift switch at 300), unpaced for the demo...")
it = iter(source)
for i in range(600):
    tr, phase = next(it)
    rec = loop.stream_step(tr, phase)
    if i in (100, 300) or (i == 450):
        print(f"  step {i:4d} [{phase:6s}] u={rec['u']:.3f} "
              f"proposed={cohort.ACTIONS[rec['proposed']]:8s} "
              f"emitted={cohort.ACTIONS[rec['emitted']]:8s} "
              f"labels={rec['labels']} updates={rec['updates']}")
    if i == 449:
        print("  ... raising the query threshold live (tier 1, instant):")
        loop.submit_control("set_param", {"name": "tau", "value": 0.5})

snap = loop.metrics_snapshot(include_timing=False)
print("\nstream metrics:")
for key in ("steps", "query_rate", "labels_added", "updates", "final_buffer",
            "substitutions", "forced_queries"):
    print(f"  {key}: {snap[key]}")
print(f"  hot tau after live change: {loop.hot.tau}")

# per-step uncertainty is what gates expert queries
labels = [e for e in loop.events if e["type"] == "label"]
prov = {}
for e in labels:
    prov[e["provenance"]] = prov.get(e["provenance"], 0) + 1
print(f"  label provenance: {prov}")
