"""Streaming online loop: act, gate, query, select, update.

Per incoming transition the loop scores ensemble uncertainty, picks an
action, runs the safety gate (substituting the conservative fallback on any
violation), pools high-uncertainty states, queries experts in k-center
batches, and runs small fitting blocks on the prioritized replay buffers.
Hot parameters steer all of it live, in three tiers.
"""

from __future__ import annotations

import hashlib
import json
import queue
import time
from dataclasses import dataclass, field

import numpy as np

from . import cohort
from .cohort import PLACEBO, STATE_DIM, Transition
from .nn import AdamW, Tensor, cross_entropy, huber, no_grad, smooth_l1
from .outcome import OutcomeModel, RewardNormStats, normalize_reward, denormalize_reward
from .policy import (
    N_ACTIONS, QEnsemble, QNetwork, BehaviorModel, TargetNetworkPair,
    bcq_actions, candidate_mask,
)
from .safety import SafetyVerdict, safety_gate
from .twin import TwinEnsemble

EPS_CV = 1e-8


# -- uncertainty ---------------------------------------------------------------


@dataclass
class UncertaintyStat:
    mu: np.ndarray        # (K,) per-action ensemble mean
    sigma: np.ndarray     # (K,) per-action sample std (n-1)
    cv: np.ndarray        # (K,) coefficient of variation
    u_tilde: float        # tanh-squashed max CV, in [0, 1)


def uncertainty(state: np.ndarray, ens: QEnsemble, eps: float = EPS_CV) -> UncertaintyStat:
    """Coefficient-of-variation query statistic from the H-head ensemble."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    q = ens.all_q(np.atleast_2d(state))[:, 0, :]      # (H, K)
    mu = q.mean(axis=0)
    # std on head-0-shifted values: exactly zero when all heads agree
    sigma = (q - q[0:1]).std(axis=0, ddof=1)
    cv = sigma / (np.abs(mu) + eps)
    # float64 tanh saturates to 1.0 for huge CV; the statistic stays in [0, 1)
    u = min(float(np.tanh(cv.max())), np.nextafter(1.0, 0.0))
    return UncertaintyStat(mu=mu, sigma=sigma, cv=cv, u_tilde=u)


class RunningStateStats:
    """Streaming per-component mean/variance (Welford) over observed states."""

    def __init__(self):
        self.count = 0
        self.mean = np.zeros(STATE_DIM)
        self.m2 = np.zeros(STATE_DIM)

    def update(self, state: np.ndarray):
        self.count += 1
        delta = state - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (state - self.mean)

    def variance_trace(self) -> float:
        if self.count < 2:
            return 0.0
        return float((self.m2 / (self.count - 1)).sum())


def bcq_state_uncertainty(state: np.ndarray, stats: RunningStateStats,
                          eps: float = EPS_CV) -> float:
    """Ensemble-free proxy: squared distance to the running mean, normalized
    by the running variance trace, capped at 1. Cold start is maximally
    uncertain."""
    if stats.count < 2:
        return 1.0
    d2 = float(((state - stats.mean) ** 2).sum())
    return min(1.0, d2 / (stats.variance_trace() + eps))


# -- k-center batch selection -----------------------------------------------------


def kcenter_select(states: np.ndarray, weights: np.ndarray, k: int) -> list[int]:
    """Uncertainty-weighted farthest-first selection of k pool indices.

    Seed with the highest-weight state, then repeatedly add the state
    maximizing weight * (Euclidean distance to the nearest selected state).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    n = len(states)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= pool size, got k={k}, pool={n}")
    selected = [int(weights.argmax())]
    min_dist = np.linalg.norm(states - states[selected[0]], axis=1)
    for _ in range(k - 1):
        min_dist[selected] = 0.0
        scores = weights * min_dist
        nxt = int(scores.argmax())
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(states - states[nxt], axis=1))
    return selected


# -- replay buffers ----------------------------------------------------------------


@dataclass
class BufferItem:
    transition: Transition
    omega: float          # uncertainty weight at collection time
    t_added: int
    provenance: str = "simulated"


class ReplayBuffers:
    """Labeled (10K) and weak (50K) FIFO buffers with priority sampling."""

    def __init__(self, labeled_capacity: int = 10_000, weak_capacity: int = 50_000,
                 lambda_decay: float = 0.01):
        self.labeled: list[BufferItem] = []
        self.weak: list[BufferItem] = []
        self.labeled_capacity = labeled_capacity
        self.weak_capacity = weak_capacity
        self.lambda_decay = lambda_decay

    def add_labeled(self, item: BufferItem):
        self.labeled.append(item)
        if len(self.labeled) > self.labeled_capacity:
            del self.labeled[0]

    def add_weak(self, item: BufferItem):
        self.weak.append(item)
        if len(self.weak) > self.weak_capacity:
            del self.weak[0]

    def priorities(self, now: int) -> np.ndarray:
        w = np.array([it.omega * np.exp(-self.lambda_decay * (now - it.t_added))
                      for it in self.labeled])
        total = w.sum()
        if total <= 0:  # degenerate weights fall back to uniform
            return np.full(len(self.labeled), 1.0 / len(self.labeled))
        return w / total

    def sample(self, n: int, now: int, rng: np.random.Generator) -> list[BufferItem]:
        """Labeled-first priority draw; the weak buffer only fills shortfalls."""
        if not self.labeled and not self.weak:
            raise ValueError("both replay buffers are empty")
        out: list[BufferItem] = []
        if self.labeled:
            if len(self.labeled) >= n:
                p = self.priorities(now)
                idx = rng.choice(len(self.labeled), size=n, replace=True, p=p)
                return [self.labeled[i] for i in idx]
            out.extend(self.labeled)
        shortfall = n - len(out)
        if shortfall > 0 and self.weak:
            idx = rng.integers(0, len(self.weak), size=shortfall)
            out.extend(self.weak[i] for i in idx)
        return out


def replay_sample(buffers: ReplayBuffers, n: int, now: int,
                  rng: np.random.Generator) -> list[Transition]:
    return [it.transition for it in buffers.sample(n, now, rng)]


# -- EMA shadows -------------------------------------------------------------------


class EmaShadow:
    """Exponential moving average of trainable parameters, rate alpha=0.99."""

    def __init__(self, named_params: list, alpha: float = 0.99):
        self.alpha = alpha
        self.shadow = {name: p.data.copy() for name, p in named_params
                       if p.requires_grad}

    def update(self, named_params: list):
        a = self.alpha
        for name, p in named_params:
            if not p.requires_grad:
                continue
            sh = self.shadow[name]
            if sh.shape != p.data.shape:
                raise ValueError(f"shadow shape mismatch for {name}")
            sh *= a
            sh += (1.0 - a) * p.data


def ema_update(shadow: EmaShadow, named_params: list) -> EmaShadow:
    shadow.update(named_params)
    return shadow


# -- hot parameters -----------------------------------------------------------------


@dataclass
class HotParams:
    # tier 1: instant, weight-free
    tau: float = 0.2
    batch_size: int = 32
    rate_hz: float = 10.0
    candidate_n: int = N_ACTIONS
    phi: float | None = None        # perturbation bound: accepted but inert here
    # tier 2: short focused fine-tuning
    gamma: float = 0.99
    rho: float = 0.995
    lambda_reg: float = 0.01
    beta: float | None = None       # imitation balance: accepted but inert here
    focused_steps: int = 500        # M
    # tier 3: structural, cannot change live
    architecture: str = "dueling-64x64"
    feature_space: str = "vitals-10d"

    def validate(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if self.batch_size < 1 or self.rate_hz <= 0:
            raise ValueError("batch_size >= 1 and rate_hz > 0 required")


TIER1 = {"tau", "batch_size", "rate_hz", "candidate_n", "phi"}
TIER2 = {"gamma", "rho", "lambda_reg", "beta"}
TIER3 = {"architecture", "feature_space"}


@dataclass
class TierResult:
    param: str
    tier: int
    applied: bool
    message: str
    focused_steps: int = 0
    gamma_changed: bool = False


def apply_hot_param(hot: HotParams, name: str, value) -> TierResult:
    """Route one parameter change through the tier rules, mutating `hot`.

    Tier 1 applies instantly; tier 2 applies and reports the M focused steps
    the loop must schedule; tier 3 is rejected outright.
    """
    if name in TIER1:
        setattr(hot, name, value)
        hot.validate()
        return TierResult(name, 1, True, "applied instantly; no weight change")
    if name in TIER2:
        gamma_changed = name == "gamma" and value != hot.gamma
        setattr(hot, name, value)
        hot.validate()
        return TierResult(name, 2, True,
                          f"applied; {hot.focused_steps} focused gradient steps scheduled",
                          focused_steps=hot.focused_steps, gamma_changed=gamma_changed)
    if name in TIER3:
        return TierResult(name, 3, False,
                          "rejected: full retrain required for structural changes")
    raise KeyError(f"unknown hot parameter {name!r}")


# -- drift ---------------------------------------------------------------------------


def drift_inject(state: np.ndarray, offset: float = 0.3) -> np.ndarray:
    """Age-shift a state: age <- clip(age + offset); everything else untouched."""
    out = np.array(state, dtype=np.float64, copy=True)
    i = cohort.FIDX["age"]
    out[i] = min(1.0, max(0.0, out[i] + offset))
    return out


# -- expert interface ---------------------------------------------------------------


@dataclass
class ExpertLabel:
    action: int
    reward: float            # normalized units
    next_state: np.ndarray
    done: bool
    provenance: str          # simulated | human | fallback


@dataclass
class PendingQuery:
    qid: int
    state: np.ndarray
    proposed: int
    u: float
    origin_step: int
    deadline: float
    answered: bool = False


class ExpertInterface:
    """Simulated oracle plus the pending-queue bridge for human answers.

    Simulated labels replay the generator: the expert acts like the behavior
    policy and the true one-step outcome is computed for that action. Human
    answers supply the action; the outcome is still scored by the generator.
    Expired human queries fall back to a simulated label.
    """

    def __init__(self, mode: str, stats: RewardNormStats, seed: int,
                 timeout_s: float = 30.0):
        if mode not in ("simulated", "human"):
            raise ValueError(f"unknown expert mode {mode!r}")
        self.mode = mode
        self.stats = stats
        self.rng = np.random.default_rng([seed, 0xE1])
        self.timeout_s = timeout_s
        self.pending: dict[int, PendingQuery] = {}
        self._next_qid = 0

    def _label_for(self, state: np.ndarray, action: int | None,
                   provenance: str) -> ExpertLabel:
        if action is None:
            action = cohort.behavior_action(state, self.rng)
        next_state, reward, done, _ = cohort.env_step(state, action, self.rng)
        return ExpertLabel(action=int(action),
                           reward=float(normalize_reward(reward, self.stats)),
                           next_state=next_state, done=done, provenance=provenance)

    def request(self, state: np.ndarray, proposed: int, u: float,
                origin_step: int, now: float):
        """Immediate label in simulated mode; a PendingQuery in human mode."""
        if self.mode == "simulated":
            return self._label_for(state, None, "simulated")
        qid = self._next_qid
        self._next_qid += 1
        pq = PendingQuery(qid, np.array(state), proposed, u, origin_step,
                          deadline=now + self.timeout_s)
        self.pending[qid] = pq
        return pq

    def answer(self, qid: int, action: int) -> tuple[PendingQuery, ExpertLabel]:
        if qid not in self.pending:
            raise KeyError(f"unknown or already-resolved query {qid}")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action index {action} out of range")
        pq = self.pending.pop(qid)
        return pq, self._label_for(pq.state, action, "human")

    def expired(self, now: float) -> list[tuple[PendingQuery, ExpertLabel]]:
        out = []
        for qid in sorted(self.pending):
            pq = self.pending[qid]
            if now >= pq.deadline:
                del self.pending[qid]
                out.append((pq, self._label_for(pq.state, None, "fallback")))
        return out


# -- stream sources -----------------------------------------------------------------


def replay_then_generate(dataset: list[Transition], drift_at: int, seed: int,
                         age_offset: float = 0.3):
    """The evaluation stream: dataset replay, then an age-shifted generator."""
    count = 0
    for tr in dataset:
        if count >= drift_at:
            break
        yield tr, "replay"
        count += 1
    pid = 1_000_000
    while True:
        rng = cohort.patient_rng(seed, pid)
        state = cohort.sample_initial_state(rng)
        state = drift_inject(state, age_offset)
        for t in range(cohort.MAX_HORIZON):
            action = cohort.behavior_action(state, rng)
            next_state, reward, done, parts = cohort.env_step(
                state, action, rng, t=t, horizon=cohort.MAX_HORIZON)
            yield Transition(pid, t, state, action, reward, next_state, done, parts), "drift"
            if done:
                break
            state = next_state
        pid += 1


# -- the loop -----------------------------------------------------------------------


class QueryPool:
    def __init__(self, staleness: int = 500):
        self.items: list = []      # (state, u, step, proposed)
        self.staleness = staleness

    def admit(self, state: np.ndarray, u: float, step: int, proposed: int):
        self.items.append((np.array(state), float(u), int(step), int(proposed)))

    def evict_stale(self, step: int) -> int:
        before = len(self.items)
        self.items = [it for it in self.items if step - it[2] <= self.staleness]
        return before - len(self.items)

    def __len__(self):
        return len(self.items)


class StreamLoop:
    """Single-writer online learner; all mutation happens at step boundaries."""

    def __init__(self, *, mode: str = "ensemble",
                 q_ensemble: QEnsemble | None = None,
                 q_single: QNetwork | None = None,
                 behavior: BehaviorModel | None = None,
                 tau_supp: float | None = None,
                 twin_ens: TwinEnsemble | None = None,
                 outcome_model: OutcomeModel | None = None,
                 stats: RewardNormStats,
                 hot: HotParams | None = None,
                 expert_mode: str = "simulated",
                 expert_timeout_s: float = 30.0,
                 k_batch: int = 20,
                 update_trigger: int = 20,
                 block_steps: int = 20,
                 pool_staleness: int = 500,
                 seed: int = 0,
                 log_path=None):
        if mode not in ("ensemble", "single", "bcq"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "ensemble" and q_ensemble is None:
            raise ValueError("ensemble mode requires a QEnsemble")
        if mode in ("single", "bcq") and q_single is None:
            raise ValueError(f"{mode} mode requires a QNetwork")
        if mode == "bcq" and (behavior is None or tau_supp is None):
            raise ValueError("bcq mode requires a behavior model and tau_supp")
        self.mode = mode
        self.q_ensemble = q_ensemble
        self.q_single = q_single
        self.behavior = behavior
        self.tau_supp = tau_supp
        self.twin = twin_ens
        self.outcome = outcome_model
        self.stats = stats
        self.hot = hot or HotParams()
        self.expert = ExpertInterface(expert_mode, stats, seed,
                                      timeout_s=expert_timeout_s)
        self.k_batch = k_batch
        self.update_trigger = update_trigger
        self.block_steps = block_steps
        self.pool = QueryPool(staleness=pool_staleness)
        self.buffers = ReplayBuffers(lambda_decay=0.01)
        self.running_stats = RunningStateStats()
        self.rng = np.random.default_rng([seed, 0x10])
        self.control: queue.Queue = queue.Queue()
        self.seed = seed
        self.log_path = log_path
        self._log_fh = open(log_path, "a") if log_path else None

        self.step_idx = 0
        self.paused = False
        self.halted = False
        self.labels_since_block = 0
        self.pending_focused = 0
        self.focused_steps_run = 0
        self.events: list[dict] = []
        self.counters = {
            "steps": 0, "queried_steps": 0, "forced_queries": 0,
            "labels_added": 0, "updates": 0, "stale_evicted": 0,
            "substitutions": 0, "control_applied": 0, "control_rejected": 0,
        }
        self.latencies: list[float] = []
        self._wall_start = None
        self._wall_end = None

        self._init_online_training(seed)

    # -- online-training plumbing -------------------------------------------------

    def _init_online_training(self, seed: int):
        self._heads: list[QNetwork] = (
            list(self.q_ensemble.heads) if self.mode == "ensemble"
            else [self.q_single])
        self._head_targets = [TargetNetworkPair(h, rho=self.hot.rho)
                              for h in self._heads]
        self._head_opts = [AdamW(h.named_parameters(), lr=3e-4, weight_decay=0.0,
                                 clip_norm=1.0) for h in self._heads]
        self._head_shadows = [EmaShadow(h.named_parameters()) for h in self._heads]
        self._grad_steps = 0
        if self.twin is not None:
            for m in self.twin.members:
                m.freeze_for_online()
            self._twin_opts = [AdamW([(n, p) for n, p in m.named_parameters()
                                      if p.requires_grad], lr=3e-4, weight_decay=0.0,
                                     clip_norm=1.0) for m in self.twin.members]
            self._twin_shadows = [EmaShadow(m.named_parameters())
                                  for m in self.twin.members]
        if self.outcome is not None:
            for name, p in self.outcome.named_parameters():
                p.requires_grad = name.startswith(("head", "discriminator"))
            self._outcome_opt = AdamW(
                [(n, p) for n, p in self.outcome.named_parameters()
                 if p.requires_grad and n.startswith("head")],
                lr=3e-4, weight_decay=0.0, clip_norm=1.0)
            self._outcome_disc_opt = AdamW(
                [(n, p) for n, p in self.outcome.named_parameters()
                 if n.startswith("discriminator")],
                lr=3e-4, weight_decay=0.0, clip_norm=1.0)
            self._outcome_shadow = EmaShadow(self.outcome.named_parameters())

    def frozen_checksums(self) -> dict:
        out = {}
        if self.twin is not None:
            for i, m in enumerate(self.twin.members):
                out[f"twin_{i}"] = m.frozen_checksum()
        if self.outcome is not None:
            out["outcome_encoder"] = float(sum(
               p.data.sum() for n, p in self.outcome.named_parameters()
               if not p.requires_grad))
        return out

    # -- action + uncertainty -------------------------------------------------------

    def _propose(self, state: np.ndarray) -> tuple[int, float]:
        if self.mode == "ensemble":
            stat = uncertainty(state, self.q_ensemble)
            u = stat.u_tilde
            action = int(stat.mu.argmax())
        else:
            u = bcq_state_uncertainty(state, self.running_stats)
            if self.mode == "bcq":
                action = int(bcq_actions(state[None], self.q_single, self.behavior,
                                         self.tau_supp, self.hot.candidate_n)[0])
            else:
                action = int(self.q_single.q_values(state)[0].argmax())
        self.running_stats.update(state)
        return action, u

    # -- incremental updates ----------------------------------------------------------

    def _candidate_masks(self, next_states: np.ndarray) -> np.ndarray:
        n = self.hot.candidate_n
        if self.behavior is not None and n < N_ACTIONS:
            return candidate_mask(self.behavior.probs(next_states), 0.0, n)
        return np.ones((len(next_states), N_ACTIONS), dtype=bool)

    def _one_gradient_step(self, batch: list[Transition]) -> dict:
        x = np.array([tr.state for tr in batch])
        a = np.array([tr.action for tr in batch], dtype=np.int64)
        r = np.array([tr.reward for tr in batch])   # already normalized labels
        x2 = np.array([tr.next_state for tr in batch])
        d = np.array([tr.done for tr in batch], dtype=np.float64)
        cand = self._candidate_masks(x2)
        losses = {}
        # value heads: Huber TD toward the pair-min target + L2 on Q values
        q_losses = []
        for head, targets, opt, shadow in zip(self._heads, self._head_targets,
                                              self._head_opts, self._head_shadows):
            targets.rho = self.hot.rho
            tq = targets.min_q(x2)
            best = np.where(cand, tq, -np.inf).max(axis=1)
            y = r + self.hot.gamma * (1.0 - d) * best
            qs = head.q_values_t(x)
            picked = qs[np.arange(len(a)), a]
            loss = huber(picked, Tensor(y)) + self.hot.lambda_reg * (picked * picked).mean()
            if not np.isfinite(loss.data).all():
                self._event("skip", reason="non-finite q loss")
                continue
            head.zero_grad()
            loss.backward()
            opt.step()
            targets.update(head, self._grad_steps)
            shadow.update(head.named_parameters())
            q_losses.append(loss.item())
        losses["q"] = float(np.mean(q_losses)) if q_losses else None
        # dynamics members: single-step sequences, frozen early layers
        if self.twin is not None:
            states_seq = x[:, None, :]
            actions_seq = a[:, None]
            targets_seq = x2[:, None, :]
            mask = np.ones((len(x), 1), dtype=bool)
            dyn_losses = []
            for m, opt, shadow in zip(self.twin.members, self._twin_opts,
                                      self._twin_shadows):
                pred = m.forward_next(states_seq, actions_seq)
                loss = smooth_l1(pred, Tensor(targets_seq), mask)
                if not np.isfinite(loss.data).all():
                    self._event("skip", reason="non-finite dynamics loss")
                    continue
                m.zero_grad()
                loss.backward()
                opt.step()
                shadow.update(m.named_parameters())
                dyn_losses.append(loss.item())
            losses["dynamics"] = float(np.mean(dyn_losses)) if dyn_losses else None
        # outcome: discriminator keeps classifying from a detached z, then the
        # head regresses the labeled outcome; encoder stays frozen throughout
        if self.outcome is not None:
            z_const = Tensor(self.outcome.z_health(x).data)
            dloss = cross_entropy(self.outcome.discriminator(z_const), a)
            if np.isfinite(dloss.data).all():
                self.outcome.zero_grad()
                dloss.backward()
                self._outcome_disc_opt.step()
            y_raw = denormalize_reward(r, self.stats)
            pred = self.outcome.predict_t(x, a)
            loss = (pred - Tensor(y_raw)).abs().mean()
            if np.isfinite(loss.data).all():
                self.outcome.zero_grad()
                loss.backward()
                self._outcome_opt.step()
                self._outcome_shadow.update(self.outcome.named_parameters())
                losses["outcome"] = loss.item()
            else:
                self._event("skip", reason="non-finite outcome loss")
        self._grad_steps += 1
        return losses

    def incremental_update(self, n_steps: int | None = None) -> dict:
        """One fitting block: n_steps gradient steps on replay samples."""
        n_steps = n_steps or self.block_steps
        report = {"steps": 0}
        for _ in range(n_steps):
            if not self.buffers.labeled and not self.buffers.weak:
                break
            batch = replay_sample(self.buffers, self.hot.batch_size,
                                  self.step_idx, self.rng)
            losses = self._one_gradient_step(batch)
            report["steps"] += 1
            report["last_losses"] = losses
        return report

    # -- control messages -------------------------------------------------------------

    def submit_control(self, kind: str, payload: dict) -> None:
        self.control.put({"kind": kind, "payload": payload})

    def apply_hot_param(self, name: str, value) -> TierResult:
        try:
            result = apply_hot_param(self.hot, name, value)
        except (KeyError, ValueError) as exc:
            self.counters["control_rejected"] += 1
            self._event("param_rejected", param=name, error=str(exc))
            raise
        if result.applied:
            self.counters["control_applied"] += 1
            if result.tier == 2:
                self.pending_focused += result.focused_steps
            self._event("param", param=name, tier=result.tier, value=value,
                        focused=result.focused_steps)
        else:
            self.counters["control_rejected"] += 1
            self._event("param_rejected", param=name, tier=result.tier,
                        error=result.message)
        return result

    def _drain_control(self):
        while True:
            try:
                msg = self.control.get_nowait()
            except queue.Empty:
                return
            kind = msg["kind"]
            payload = msg.get("payload", {})
            if kind == "set_param":
                try:
                    self.apply_hot_param(payload["name"], payload["value"])
                except (KeyError, ValueError):
                    pass  # already audited
            elif kind == "answer_query":
                try:
                    pq, label = self.expert.answer(payload["qid"], payload["action"])
                    self._store_label(label, pq.state, pq.origin_step, pq.u)
                except (KeyError, ValueError) as exc:
                    self._event("answer_rejected", qid=payload.get("qid"),
                                error=str(exc))
            elif kind == "pause":
                self.paused = True
                self._event("paused")
            elif kind == "resume":
                self.paused = False
                self._event("resumed")

    def _run_focused(self):
        if self.pending_focused <= 0 or not self.buffers.labeled:
            return
        steps = self.pending_focused
        done = 0
        for _ in range(steps):
            batch = replay_sample(self.buffers, self.hot.batch_size,
                                  self.step_idx, self.rng)
            self._one_gradient_step(batch)
            done += 1
        self.pending_focused -= done
        self.focused_steps_run += done
        self._event("focused", steps=done)

    # -- labels ------------------------------------------------------------------------

    def _store_label(self, label: ExpertLabel, state, origin_step: int, u: float):
        tr = Transition(patient_id=-1, t=origin_step,
                        state=np.asarray(state, dtype=np.float64),
                        action=label.action, reward=label.reward,
                        next_state=label.next_state, done=label.done)
        self.buffers.add_labeled(BufferItem(tr, omega=u, t_added=origin_step,
                                            provenance=label.provenance))
        self.counters["labels_added"] += 1
        self.counters["queried_steps"] += 1
        self.labels_since_block += 1
        self._event("label", origin_step=origin_step, provenance=label.provenance,
                    action=label.action)

    def _query_batch(self, now: float):
        states = np.array([it[0] for it in self.pool.items])
        weights = np.array([it[1] for it in self.pool.items])
        chosen = kcenter_select(states, weights, min(self.k_batch, len(self.pool)))
        chosen_set = set(chosen)
        picked = [self.pool.items[i] for i in chosen]
        self.pool.items = [it for i, it in enumerate(self.pool.items)
                           if i not in chosen_set]
        for state, u, origin_step, proposed in picked:
            result = self.expert.request(state, proposed, u, origin_step, now)
            if isinstance(result, ExpertLabel):
                self._store_label(result, state, origin_step, u)
            else:
                self._event("query_pending", qid=result.qid,
                            origin_step=origin_step)

    # -- the step ---------------------------------------------------------------------

    def stream_step(self, incoming: Transition, phase: str = "replay") -> dict:
        if self.halted:
            raise RuntimeError("stream loop is halted")
        t0 = time.perf_counter()
        now = time.time()
        self._drain_control()
        self._run_focused()

        state = incoming.state
        action, u = self._propose(state)
        verdict = safety_gate(state, action)
        emitted = action if verdict.passed else verdict.fallback
        if not verdict.passed:
            self.counters["substitutions"] += 1

        queried = False
        if u > self.hot.tau or verdict.force_query:
            self.pool.admit(state, u, self.step_idx, action)
            queried = True
            if verdict.force_query:
                self.counters["forced_queries"] += 1
        self.counters["stale_evicted"] += self.pool.evict_stale(self.step_idx)

        for pq, label in self.expert.expired(now):
            self._store_label(label, pq.state, pq.origin_step, pq.u)
        if len(self.pool) >= self.k_batch:
            self._query_batch(now)

        blocks = 0
        while self.labels_since_block >= self.update_trigger:
            self.incremental_update()
            self.labels_since_block -= self.update_trigger
            self.counters["updates"] += 1
            blocks += 1

        if self.outcome is not None:
            pred = float(self.outcome.predict(state[None],
                                              np.array([emitted]))[0])
            weak_r = float(normalize_reward(pred, self.stats))
        else:
            weak_r = float(normalize_reward(incoming.reward, self.stats))
        weak = Transition(incoming.patient_id, self.step_idx, state, emitted,
                          weak_r, incoming.next_state, incoming.done)
        self.buffers.add_weak(BufferItem(weak, omega=max(u, 1e-3),
                                         t_added=self.step_idx, provenance="weak"))

        latency = time.perf_counter() - t0
        self.latencies.append(latency)
        record = {
            "type": "step", "step": self.step_idx, "ts": now, "phase": phase,
            "state_hash": hashlib.sha1(state.tobytes()).hexdigest()[:12],
            "u": round(u, 10), "proposed": int(action), "emitted": int(emitted),
            "passed": verdict.passed, "violations": verdict.violations,
            "forced": verdict.force_query, "queried": queried,
            "labels": self.counters["labels_added"],
            "bl_size": len(self.buffers.labeled),
            "bw_size": len(self.buffers.weak),
            "updates": self.counters["updates"], "blocks_now": blocks,
            "latency_s": latency,
        }
        self._write_log(record)
        self.counters["steps"] += 1
        self.step_idx += 1
        return record

    # -- run -------------------------------------------------------------------------

    def run(self, source, n_steps: int, paced: bool = True) -> dict:
        """Drive the loop from a (transition, phase) iterator."""
        self._wall_start = time.time()
        interval = lambda: 1.0 / self.hot.rate_hz
        next_tick = time.monotonic()
        done_steps = 0
        for incoming, phase in source:
            if done_steps >= n_steps or self.halted:
                break
            while self.paused and not self.halted:
                self._drain_control()
                time.sleep(0.005)
            self.stream_step(incoming, phase)
            done_steps += 1
            if paced:
                next_tick += interval()
                delay = next_tick - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_tick = time.monotonic()  # overrun: re-anchor the clock
        self._wall_end = time.time()
        if self._log_fh:
            self._log_fh.flush()
        return self.metrics_snapshot()

    def halt(self):
        self.halted = True

    # -- reporting ---------------------------------------------------------------------

    def _event(self, etype: str, **kw):
        evt = {"type": etype, "step": self.step_idx, **kw}
        self.events.append(evt)
        self._write_log(evt)

    def _write_log(self, record: dict):
        if self._log_fh:
            self._log_fh.write(json.dumps(record) + "\n")

    def metrics_snapshot(self, include_timing: bool = True) -> dict:
        c = dict(self.counters)
        snap = {
            "steps": c["steps"],
            "query_rate": c["queried_steps"] / c["steps"] if c["steps"] else 0.0,
            "forced_queries": c["forced_queries"],
            "labels_added": c["labels_added"],
            "final_buffer": len(self.buffers.labeled),
            "weak_buffer": len(self.buffers.weak),
            "updates": c["updates"],
            "focused_steps": self.focused_steps_run,
            "safety_rate": 1.0 if c["steps"] else None,  # post-gate, by construction
            "substitutions": c["substitutions"],
            "stale_evicted": c["stale_evicted"],
            "pool_size": len(self.pool),
            "pending_queries": len(self.expert.pending),
            "hot": {k: getattr(self.hot, k) for k in
                    ("tau", "batch_size", "rate_hz", "candidate_n", "gamma",
                     "rho", "lambda_reg")},
            "step": self.step_idx,
        }
        if include_timing:
            snap["mean_latency_s"] = (float(np.mean(self.latencies))
                                      if self.latencies else 0.0)
            wall_end = self._wall_end or time.time()
            if self._wall_start and snap["steps"]:
                snap["throughput_hz"] = snap["steps"] / (wall_end - self._wall_start)
        return snap
