#!/usr/bin/env python3
"""Train a small dynamics ensemble and look at what makes it a digital twin:
bounded residual updates, one-step fidelity, error growth over rollout
horizon, and the ensemble variance that later drives expert querying.

Uses a reduced cohort so it finishes in about two minutes; the acceptance
suite runs the full-scale version.
"""

import numpy as np

from careloop import cohort, twin
from careloop.nn import no_grad

transitions, manifest = cohort.generate_cohort(400, seed=7)
train, val = cohort.split_transitions(transitions, manifest)
print(f"{len(train)} train / {len(val)} val transitions")

members, histories = [], []
for seed in range(5):
    model, hist = twin.train_dynamics(train, val, seed=seed,
                                      config=twin.TrainConfig(max_epochs=4))
    members.append(model)
    histories.append(hist)
    print(f"member {seed}: best val loss {hist['best_val_loss']:.2e} "
          f"({len(hist['val_loss'])} epochs)")
ens = twin.TwinEnsemble(members)

# bounded update: no single step moves any component more than 0.05
rng = np.random.default_rng(0)
s = rng.uniform(0, 1, (6, 10))
a = rng.integers(0, 5, 6)
nxt = twin.predict_next(members[0], s, a)
print(f"\nmax component change in one step: {np.abs(nxt - s[-1]).max():.4f} "
      f"(bound {twin.STEP_BOUND})")

# one-step fidelity on held-out patients
seqs = twin.transitions_to_sequences(val)
states, actions, targets, mask = twin.pad_batch(seqs[:64])
with no_grad():
    pred = members[0].forward_next(states, actions).data
res = ((pred - targets) ** 2)[mask].sum()
tot = ((targets - targets[mask].mean(axis=0)) ** 2)[mask].sum()
print(f"single-member one-step R2 on held-out: {1 - res / tot:.3f}")

# multi-step error growth: predictions feed back as history
long_seqs = [x for x in seqs if len(x[0]) >= 6][:128]
states0 = np.array([x[0][0] for x in long_seqs])
acts = np.array([x[1][:5] for x in long_seqs])
truth = np.array([x[2][:5] for x in long_seqs])
hist_s = states0[:, None, :]
hist_a = np.zeros((len(long_seqs), 0), dtype=np.int64)
print("\nmulti-step MSE (error accumulates with horizon):")
for h in range(5):
    hist_a = np.concatenate([hist_a, acts[:, h:h + 1]], axis=1)
    mean, var = ens.predict(hist_s, hist_a)
    print(f"  t+{h + 1}: MSE {((mean - truth[:, h]) ** 2).mean():.2e}   "
          f"mean ensemble variance {var.mean():.2e}")
    hist_s = np.concatenate([hist_s, mean[:, None, :]], axis=1)
