"""Offline policy learning: discrete BCQ plus the value-based baseline family.

All methods share one preprocessing path (normalized rewards, identical
splits), one dueling Q architecture, and one evaluation hook, so Table-style
comparisons measure the algorithm and nothing else. The H=5 Q-ensemble the
online stage consumes is the five per-seed BCQ value networks.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import N_ACTIONS, STATE_DIM, Transition
from .nn import (
    AdamW, DuelingHead, MLP, Module, Tensor, cross_entropy, huber,
    load_checkpoint, no_grad, save_checkpoint,
)
from .outcome import RewardNormStats, normalize_reward

BASELINE_KINDS = ("DQN", "DoubleDQN", "NFQ", "CQL")
TAU_GRID = (0.05, 0.1, 0.2, 0.3)


class QNetwork(Module):
    """Dueling action-value network over the 10-d patient state."""

    def __init__(self, seed: int = 0, hidden: int = 64):
        rng = np.random.default_rng([seed, 0x51])
        self.seed = seed
        self.trunk = MLP([STATE_DIM, hidden, hidden], rng)
        self.head = DuelingHead(hidden, N_ACTIONS, rng)

    def q_values_t(self, states: np.ndarray) -> Tensor:
        feats = self.trunk(Tensor(np.atleast_2d(states))).relu()
        return self.head(feats)

    def q_values(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.q_values_t(states).data.copy()

    def clone(self) -> "QNetwork":
        other = QNetwork(seed=self.seed)
        other.load_state_dict(self.state_dict())
        return other


class BehaviorModel(Module):
    """Classifier estimate of the data-generating action distribution b(a|s)."""

    def __init__(self, seed: int = 0, hidden: int = 64):
        rng = np.random.default_rng([seed, 0xB0])
        self.seed = seed
        self.net = MLP([STATE_DIM, hidden, N_ACTIONS], rng)

    def logits_t(self, states: np.ndarray) -> Tensor:
        return self.net(Tensor(np.atleast_2d(states)))

    def probs(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits_t(states).softmax(axis=-1).data.copy()


class QEnsemble:
    """H = 5 architecture-identical value heads; actions come from the mean."""

    H = 5

    def __init__(self, heads: list[QNetwork]):
        if len(heads) != self.H:
            raise ValueError(f"ensemble requires H={self.H} heads, got {len(heads)}")
        self.heads = heads

    def all_q(self, states: np.ndarray) -> np.ndarray:
        """(H, B, K) action values from every head."""
        return np.stack([h.q_values(states) for h in self.heads])

    def mean_q(self, states: np.ndarray) -> np.ndarray:
        return self.all_q(states).mean(axis=0)


def ensemble_action(state: np.ndarray, ens: QEnsemble) -> int:
    """Greedy action on the ensemble-mean values; ties take the lowest index."""
    return int(ens.mean_q(np.atleast_2d(state))[0].argmax())


def ensemble_actions(states: np.ndarray, ens: QEnsemble) -> np.ndarray:
    return ens.mean_q(states).argmax(axis=1)


# -- BCQ action rule -------------------------------------------------------------


def candidate_mask(probs: np.ndarray, tau: float, top_n: int = N_ACTIONS) -> np.ndarray:
    """Support-constrained candidate actions per row, with argmax-b fallback.

    probs (B, K): mask[i, a] is True when b(a|s_i) >= tau, restricted to the
    top_n most probable actions. Rows whose constraint empties out fall back
    to the single most probable action.
    """
    probs = np.atleast_2d(probs)
    mask = probs >= tau
    if top_n < N_ACTIONS:
        order = np.argsort(-probs, axis=1, kind="stable")
        keep = np.zeros_like(mask)
        np.put_along_axis(keep, order[:, :top_n], True, axis=1)
        mask &= keep
    empty = ~mask.any(axis=1)
    if empty.any():
        mask[empty, probs[empty].argmax(axis=1)] = True
    return mask


def bcq_action(state: np.ndarray, q: QNetwork, b: BehaviorModel,
               tau_supp: float) -> int:
    """Greedy over {a : b(a|s) >= tau_supp}; empty set falls back to argmax b."""
    if not 0.0 <= tau_supp < 1.0:
        raise ValueError("tau_supp must be in [0, 1)")
    probs = b.probs(state)
    mask = candidate_mask(probs, tau_supp)
    qa = q.q_values(state)[0]
    masked = np.where(mask[0], qa, -np.inf)
    return int(masked.argmax())


def bcq_actions(states: np.ndarray, q: QNetwork, b: BehaviorModel,
                tau_supp: float, top_n: int = N_ACTIONS) -> np.ndarray:
    mask = candidate_mask(b.probs(states), tau_supp, top_n)
    qa = q.q_values(states)
    return np.where(mask, qa, -np.inf).argmax(axis=1)


# -- targets ----------------------------------------------------------------------


class TargetNetworkPair:
    """Two EMA target copies; values come from their elementwise minimum.

    Hard syncs alternate between the copies so they stay staggered instead
    of collapsing onto one another.
    """

    def __init__(self, online: QNetwork, rho: float = 0.995,
                 hard_sync_every: int = 1000):
        self.t1 = online.clone()
        self.t2 = online.clone()
        self.rho = rho
        self.hard_sync_every = hard_sync_every
        self._syncs = 0

    def min_q(self, states: np.ndarray) -> np.ndarray:
        return np.minimum(self.t1.q_values(states), self.t2.q_values(states))

    def update(self, online: QNetwork, step: int):
        for target in (self.t1, self.t2):
            for (_, pt), (_, po) in zip(target.named_parameters(),
                                        online.named_parameters()):
                pt.data *= self.rho
                pt.data += (1.0 - self.rho) * po.data
        if self.hard_sync_every and step > 0 and step % self.hard_sync_every == 0:
            target = self.t1 if self._syncs % 2 == 0 else self.t2
            target.load_state_dict(online.state_dict())
            self._syncs += 1


def td_target(r_tilde: float, next_state: np.ndarray, targets: TargetNetworkPair,
              gamma: float, candidate_set, terminal: bool = False) -> float:
    """y = r + gamma * max over candidates of min_j Q_j^-(s', a'); r at terminals."""
    candidate_set = list(candidate_set)
    if not candidate_set:
        raise ValueError("candidate set must be non-empty")
    if terminal:
        return float(r_tilde)
    q = targets.min_q(np.atleast_2d(next_state))[0]
    return float(r_tilde + gamma * max(q[a] for a in candidate_set))


def _td_targets_batch(rewards, next_states, dones, targets: TargetNetworkPair,
                      gamma: float, cand_mask: np.ndarray) -> np.ndarray:
    q = targets.min_q(next_states)
    best = np.where(cand_mask, q, -np.inf).max(axis=1)
    return rewards + gamma * (1.0 - dones) * best


def dqn_targets(target_net, rewards, next_states, dones, gamma: float) -> np.ndarray:
    """Plain max-target: y = r + gamma * (1-d) * max_a' Q^-(s', a')."""
    return rewards + gamma * (1.0 - dones) * target_net.q_values(next_states).max(axis=1)


def double_dqn_targets(online_net, target_net, rewards, next_states, dones,
                       gamma: float) -> np.ndarray:
    """Online net selects a', target net evaluates it."""
    sel = online_net.q_values(next_states).argmax(axis=1)
    tq = target_net.q_values(next_states)
    return rewards + gamma * (1.0 - dones) * tq[np.arange(len(sel)), sel]


# -- shared training scaffolding ------------------------------------------------------


@dataclass
class PolicyTrainConfig:
    gamma: float = 0.99
    lr: float = 3e-4
    batch_size: int = 256
    n_steps: int = 20_000
    eval_every: int = 2000
    rho: float = 0.995
    hard_sync_every: int = 1000
    tau_train: float = 0.1
    top_n: int = N_ACTIONS
    alpha_cql: float = 1.0
    behavior_epochs: int = 6
    nfq_sweeps: int = 40
    nfq_epochs_per_sweep: int = 1


def _dataset_arrays(transitions: list[Transition], stats: RewardNormStats):
    x = np.array([tr.state for tr in transitions])
    a = np.array([tr.action for tr in transitions], dtype=np.int64)
    r = normalize_reward(np.array([tr.reward for tr in transitions]), stats)
    x2 = np.array([tr.next_state for tr in transitions])
    d = np.array([tr.done for tr in transitions], dtype=np.float64)
    return x, a, r, x2, d


def train_behavior(transitions: list[Transition], seed: int = 0,
                   epochs: int = 6) -> BehaviorModel:
    model = BehaviorModel(seed=seed)
    opt = AdamW(model.named_parameters(), lr=3e-4, weight_decay=0.0, clip_norm=1.0)
    x = np.array([tr.state for tr in transitions])
    a = np.array([tr.action for tr in transitions], dtype=np.int64)
    rng = np.random.default_rng([seed, 0xBE])
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(order), 512):
            idx = order[i:i + 512]
            loss = cross_entropy(model.logits_t(x[idx]), a[idx])
            model.zero_grad()
            loss.backward()
            opt.step()
    return model


class _SingleTarget:
    """Plain periodically hard-synced target copy (the DQN-family scheme)."""

    def __init__(self, online: QNetwork, sync_every: int = 500):
        self.net = online.clone()
        self.sync_every = sync_every

    def q_values(self, states):
        return self.net.q_values(states)

    def update(self, online: QNetwork, step: int):
        if (step + 1) % self.sync_every == 0:
            self.net.load_state_dict(online.state_dict())


def _fit_q(kind: str, transitions, val_transitions, stats, seed,
           config: PolicyTrainConfig, behavior: BehaviorModel | None):
    """One TD training loop covering BCQ / DQN / DoubleDQN / CQL."""
    x, a, r, x2, d = _dataset_arrays(transitions, stats)
    xv, av, rv, x2v, dv = _dataset_arrays(val_transitions, stats)
    q = QNetwork(seed=seed)
    if kind == "BCQ":
        targets = TargetNetworkPair(q, rho=config.rho,
                                    hard_sync_every=config.hard_sync_every)
    else:
        targets = _SingleTarget(q, sync_every=500)
    opt = AdamW(q.named_parameters(), lr=config.lr, weight_decay=0.0, clip_norm=1.0)
    rng = np.random.default_rng([seed, 0x71])

    if kind == "BCQ":
        probs_next = behavior.probs(x2)
        cand_full = candidate_mask(probs_next, config.tau_train, config.top_n)
        probs_next_val = behavior.probs(x2v)
        cand_val = candidate_mask(probs_next_val, config.tau_train, config.top_n)
    else:
        cand_full = np.ones((len(x2), N_ACTIONS), dtype=bool)
        cand_val = np.ones((len(x2v), N_ACTIONS), dtype=bool)

    best_loss = np.inf
    best_state = q.state_dict()
    history = {"val_loss": []}
    for step in range(config.n_steps):
        idx = rng.integers(0, len(x), size=config.batch_size)
        xb, ab, rb, x2b, db = x[idx], a[idx], r[idx], x2[idx], d[idx]
        cand = cand_full[idx]
        if kind == "DoubleDQN":
            y = double_dqn_targets(q, targets.net, rb, x2b, db, config.gamma)
        elif kind in ("DQN", "CQL"):
            y = dqn_targets(targets.net, rb, x2b, db, config.gamma)
        else:  # BCQ uses the pair minimum over the constrained candidates
            y = _td_targets_batch(rb, x2b, db, targets, config.gamma, cand)
        qs = q.q_values_t(xb)
        picked = qs[np.arange(len(ab)), ab]
        loss = huber(picked, Tensor(y))
        if kind == "CQL":
            push_down = qs.logsumexp(axis=1).mean()
            push_up = picked.mean()
            loss = loss + config.alpha_cql * (push_down - push_up)
        if not np.isfinite(loss.data).all():
            q.load_state_dict(best_state)  # divergence: keep last stable weights
            history["diverged_at"] = step
            break
        q.zero_grad()
        loss.backward()
        opt.step()
        targets.update(q, step)
        if (step + 1) % config.eval_every == 0:
            with no_grad():
                if kind == "DoubleDQN":
                    yv = double_dqn_targets(q, targets.net, rv, x2v, dv, config.gamma)
                elif kind in ("DQN", "CQL"):
                    yv = dqn_targets(targets.net, rv, x2v, dv, config.gamma)
                else:
                    yv = _td_targets_batch(rv, x2v, dv, targets, config.gamma, cand_val)
                qv = q.q_values(xv)[np.arange(len(av)), av]
                val_loss = float(huber(Tensor(qv), Tensor(yv)).item())
            history["val_loss"].append(val_loss)
            if val_loss < best_loss:
                best_loss = val_loss
                best_state = q.state_dict()
    q.load_state_dict(best_state)
    history["best_val_loss"] = best_loss
    return q, history


def _fit_nfq(transitions, stats, seed, config: PolicyTrainConfig):
    """Fitted Q-iteration: recompute full-dataset targets, regress, repeat."""
    x, a, r, x2, d = _dataset_arrays(transitions, stats)
    q = QNetwork(seed=seed)
    opt = AdamW(q.named_parameters(), lr=config.lr, weight_decay=0.0, clip_norm=1.0)
    rng = np.random.default_rng([seed, 0x4F])
    for sweep in range(config.nfq_sweeps):
        frozen = q.clone()
        with no_grad():
            y = r + config.gamma * (1.0 - d) * frozen.q_values(x2).max(axis=1)
        for _ in range(config.nfq_epochs_per_sweep):
            order = rng.permutation(len(x))
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                qs = q.q_values_t(x[idx])
                picked = qs[np.arange(len(idx)), a[idx]]
                loss = huber(picked, Tensor(y[idx]))
                if not np.isfinite(loss.data).all():
                    return q, {"diverged_at": sweep}
                q.zero_grad()
                loss.backward()
                opt.step()
    return q, {}


def train_baseline(kind: str, transitions, val_transitions, stats: RewardNormStats,
                   seed: int = 0, config: PolicyTrainConfig | None = None):
    """Train one of DQN / DoubleDQN / NFQ / CQL; returns (QNetwork, history)."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    config = config or PolicyTrainConfig()
    if kind == "NFQ":
        return _fit_nfq(transitions, stats, seed, config)
    return _fit_q(kind, transitions, val_transitions, stats, seed, config, None)


def train_bcq(transitions, val_transitions, stats: RewardNormStats, seed: int = 0,
              config: PolicyTrainConfig | None = None,
              return_eval_fn=None):
    """Discrete BCQ: behavior cloning + support-constrained double-min TD.

    `return_eval_fn(policy_fn) -> mean validation return`, when provided,
    drives tau_supp selection over the grid; otherwise the training tau is
    kept. Returns (q, behavior, info).
    """
    config = config or PolicyTrainConfig()
    behavior = train_behavior(transitions, seed=seed, epochs=config.behavior_epochs)
    q, history = _fit_q("BCQ", transitions, val_transitions, stats, seed,
                        config, behavior)
    info = {"history": history, "tau_supp": config.tau_train, "gamma": config.gamma}
    if return_eval_fn is not None:
        scores = {}
        for tau in TAU_GRID:
            def policy_fn(states, _tau=tau):
                return bcq_actions(states, q, behavior, _tau, config.top_n)
            scores[tau] = float(return_eval_fn(policy_fn))
        best_tau = max(sorted(scores), key=lambda t: scores[t])
        info["tau_supp"] = best_tau
        info["tau_grid_scores"] = scores
    return q, behavior, info


# -- persistence ----------------------------------------------------------------------


def save_policy(path, q: QNetwork, kind: str, tau_supp: float | None,
                gamma: float, stats_fingerprint: str,
                behavior: BehaviorModel | None = None):
    """Portable policy checkpoint: weights + a manifest of how to act with them."""
    tensors = {f"q.{k}": v for k, v in q.state_dict().items()}
    if behavior is not None:
        tensors.update({f"b.{k}": v for k, v in behavior.state_dict().items()})
    meta = {"kind": kind, "tau_supp": tau_supp, "gamma": gamma,
            "reward_stats_fingerprint": stats_fingerprint, "seed": q.seed,
            "has_behavior": behavior is not None}
    save_checkpoint(path, tensors, meta)


def load_policy(path):
    tensors, meta = load_checkpoint(path)
    q = QNetwork(seed=int(meta.get("seed", 0)))
    q.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("q.")})
    behavior = None
    if meta.get("has_behavior"):
        behavior = BehaviorModel(seed=int(meta.get("seed", 0)))
        behavior.load_state_dict({k[2:]: v for k, v in tensors.items()
                                  if k.startswith("b.")})
    return q, behavior, meta


def policy_fn_from(kind: str, q: QNetwork, behavior: BehaviorModel | None,
                   tau_supp: float | None, top_n: int = N_ACTIONS):
    """Batched states -> actions callable for rollouts and streams."""
    if kind == "BCQ" and behavior is not None and tau_supp is not None:
        return lambda states: bcq_actions(states, q, behavior, tau_supp, top_n)
    return lambda states: q.q_values(states).argmax(axis=1)
