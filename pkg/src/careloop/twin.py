"""Patient digital twin: causal sequence model over (state, action) histories.

The model predicts a bounded residual update of the current state,
    s_next = clip(s + 0.05 * tanh(raw_residual), 0, 1),
so a single step can never move any component by more than 0.05 before
clipping. Five members trained under different seeds form the ensemble used
for rollouts (mean) and uncertainty (per-component sample variance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import MAX_HORIZON, N_ACTIONS, STATE_DIM, Transition
from .nn import (
    AdamW, Dense, Embedding, LayerNorm, Module, PlateauScheduler, Tensor,
    TransformerBlock, load_checkpoint, no_grad, save_checkpoint, sinusoidal_positions,
    smooth_l1,
)

STEP_BOUND = 0.05
ENSEMBLE_SIZE = 5

WIDTH = 64
N_BLOCKS = 2
N_HEADS = 4


class DynamicsModel(Module):
    """Causal encoder over state+action tokens with a residual head."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng([seed, 0x7717])
        self.seed = seed
        self.state_proj = Dense(STATE_DIM, WIDTH, rng)
        self.action_emb = Embedding(N_ACTIONS, WIDTH, rng)
        self.blocks = [TransformerBlock(WIDTH, N_HEADS, rng) for _ in range(N_BLOCKS)]
        self.ln_f = LayerNorm(WIDTH)
        self.head = Dense(WIDTH, STATE_DIM, rng)
        self._pos = sinusoidal_positions(MAX_HORIZON, WIDTH)

    def raw_residual(self, states: np.ndarray, actions: np.ndarray) -> Tensor:
        """(B, T, d) states + (B, T) actions -> (B, T, d) pre-tanh residuals."""
        b, t, _ = states.shape
        x = self.state_proj(Tensor(states)) + self.action_emb(actions)
        x = x + Tensor(self._pos[:t])
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def forward_next(self, states: np.ndarray, actions: np.ndarray) -> Tensor:
        """Bounded-update next-state prediction at every position."""
        raw = self.raw_residual(states, actions)
        return (Tensor(states) + STEP_BOUND * raw.tanh()).clip(0.0, 1.0)

    def freeze_for_online(self):
        """Online contract: only the last block, final norm, and residual
        head stay trainable; everything earlier is frozen."""
        self.set_trainable(False)
        self.blocks[-1].set_trainable(True)
        self.ln_f.set_trainable(True)
        self.head.set_trainable(True)

    def frozen_checksum(self) -> float:
        return float(sum(p.data.sum() for _, p in self.named_parameters()
                         if not p.requires_grad))


def predict_next(model: DynamicsModel, states, actions) -> np.ndarray:
    """Next state after the last history position, for a single trajectory."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("history must be a non-empty (T, d) array")
    if len(states) != len(actions):
        raise ValueError("state and action histories must align")
    with no_grad():
        out = model.forward_next(states[None], actions[None])
    return out.data[0, -1]


# -- sequence batching ---------------------------------------------------------


def transitions_to_sequences(transitions: list[Transition]):
    """Group per-patient transitions into (states, actions, targets, mask) arrays."""
    by_patient: dict[int, list[Transition]] = {}
    for tr in transitions:
        by_patient.setdefault(tr.patient_id, []).append(tr)
    seqs = []
    for pid in sorted(by_patient):
        trs = sorted(by_patient[pid], key=lambda tr: tr.t)
        states = np.array([tr.state for tr in trs])
        actions = np.array([tr.action for tr in trs], dtype=np.int64)
        targets = np.array([tr.next_state for tr in trs])
        seqs.append((states, actions, targets))
    return seqs


def pad_batch(seqs: list):
    t_max = max(len(s) for s, _, _ in seqs)
    b = len(seqs)
    states = np.zeros((b, t_max, STATE_DIM))
    actions = np.zeros((b, t_max), dtype=np.int64)
    targets = np.zeros((b, t_max, STATE_DIM))
    mask = np.zeros((b, t_max), dtype=bool)
    for i, (s, a, y) in enumerate(seqs):
        n = len(s)
        states[i, :n] = s
        actions[i, :n] = a
        targets[i, :n] = y
        mask[i, :n] = True
    return states, actions, targets, mask


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 32
    max_epochs: int = 12
    patience: int = 5
    lr_patience: int = 2


def _masked_val_loss(model: DynamicsModel, val_seqs, batch_size: int) -> float:
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(val_seqs), batch_size):
            states, actions, targets, mask = pad_batch(val_seqs[i:i + batch_size])
            pred = model.forward_next(states, actions)
            loss = smooth_l1(pred, Tensor(targets), mask)
            n = int(mask.sum())
            total += loss.item() * n
            count += n
    return total / max(count, 1)


def train_dynamics(train_transitions: list[Transition],
                   val_transitions: list[Transition], seed: int,
                   config: TrainConfig | None = None) -> tuple[DynamicsModel, dict]:
    """Fit one ensemble member; returns (model at best val loss, history)."""
    config = config or TrainConfig()
    train_seqs = transitions_to_sequences(train_transitions)
    val_seqs = transitions_to_sequences(val_transitions)
    model = DynamicsModel(seed)
    opt = AdamW(model.named_parameters(), lr=config.lr,
                weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    sched = PlateauScheduler(opt, factor=0.5, patience=config.lr_patience)
    rng = np.random.default_rng([seed, 0x5EED])

    best_loss = np.inf
    best_state = model.state_dict()
    bad_evals = 0
    history = {"val_loss": [], "train_loss": []}
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_seqs))
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            batch = [train_seqs[j] for j in order[i:i + config.batch_size]]
            states, actions, targets, mask = pad_batch(batch)
            pred = model.forward_next(states, actions)
            loss = smooth_l1(pred, Tensor(targets), mask)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(
                    f"non-finite dynamics loss at epoch {epoch}, batch {n_batches}")
            model.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        val_loss = _masked_val_loss(model, val_seqs, config.batch_size)
        history["train_loss"].append(epoch_loss / max(n_batches, 1))
        history["val_loss"].append(val_loss)
        sched.step(val_loss)
        if val_loss < best_loss - 1e-9:
            best_loss = val_loss
            best_state = model.state_dict()
            bad_evals = 0
        else:
            bad_evals += 1
            if bad_evals >= config.patience:
                break
    model.load_state_dict(best_state)
    history["best_val_loss"] = best_loss
    return model, history


# -- incremental decoding ---------------------------------------------------------
#
# Rollouts only ever append one step to the history, so recomputing the full
# causal forward each step costs O(T^2) per step. The cache keeps per-block
# K/V and processes just the new position in plain numpy (inference only);
# it reproduces forward_next's last position to float precision.


def _ln_np(x: np.ndarray, ln) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


class DecodeCache:
    """Per-member incremental state: cached K/V per block and the position."""

    def __init__(self, model: DynamicsModel, batch: int):
        self.model = model
        self.t = 0
        self.kv = [(np.zeros((batch, N_HEADS, 0, WIDTH // N_HEADS)),
                    np.zeros((batch, N_HEADS, 0, WIDTH // N_HEADS)))
                   for _ in model.blocks]

    def step(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Feed one (state, action) position; returns the bounded next state."""
        m = self.model
        b = states.shape[0]
        h, hd = N_HEADS, WIDTH // N_HEADS
        x = states @ m.state_proj.w.data + m.state_proj.b.data \
            + m.action_emb.table.data[actions] + m._pos[self.t]
        for i, block in enumerate(m.blocks):
            attn = block.attn
            hidden = _ln_np(x, block.ln1)
            q = (hidden @ attn.wq.w.data + attn.wq.b.data).reshape(b, h, 1, hd)
            k = (hidden @ attn.wk.w.data + attn.wk.b.data).reshape(b, h, 1, hd)
            v = (hidden @ attn.wv.w.data + attn.wv.b.data).reshape(b, h, 1, hd)
            k_all = np.concatenate([self.kv[i][0], k], axis=2)
            v_all = np.concatenate([self.kv[i][1], v], axis=2)
            self.kv[i] = (k_all, v_all)
            scores = (q @ np.swapaxes(k_all, -1, -2)) * (1.0 / np.sqrt(hd))
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            out = (w @ v_all).reshape(b, WIDTH)
            x = x + out @ attn.wo.w.data + attn.wo.b.data
            hidden2 = _ln_np(x, block.ln2)
            up = _gelu_np(hidden2 @ block.ff.up.w.data + block.ff.up.b.data)
            x = x + up @ block.ff.down.w.data + block.ff.down.b.data
        raw = _ln_np(x, m.ln_f) @ m.head.w.data + m.head.b.data
        self.t += 1
        return np.clip(states + STEP_BOUND * np.tanh(raw), 0.0, 1.0)


# -- ensemble -------------------------------------------------------------------


class TwinEnsemble:
    """Exactly five architecture-identical dynamics models."""

    def __init__(self, members: list[DynamicsModel]):
        if len(members) != ENSEMBLE_SIZE:
            raise ValueError(f"ensemble requires {ENSEMBLE_SIZE} members, got {len(members)}")
        self.members = members

    def predict(self, states: np.ndarray, actions: np.ndarray):
        """Batched one-step prediction from histories.

        states (B, T, d), actions (B, T) -> (mean (B, d), variance (B, d)).
        Mean is the average of the members' bounded-updated states,
        re-clipped; variance uses the n-1 denominator.
        """
        preds = []
        with no_grad():
            for m in self.members:
                preds.append(m.forward_next(states, actions).data[:, -1, :])
        stackd = np.stack(preds)  # (H, B, d)
        # aggregate member-0-shifted values so exact member agreement gives
        # exactly the member prediction and exactly zero variance
        shifted = stackd - stackd[0:1]
        mean = np.clip(stackd[0] + shifted.mean(axis=0), 0.0, 1.0)
        var = shifted.var(axis=0, ddof=1)
        return mean, var


def ensemble_predict(ens: TwinEnsemble, states, actions):
    """Single-history convenience wrapper around TwinEnsemble.predict."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("history must be a non-empty (T, d) array")
    mean, var = ens.predict(states[None], actions[None])
    return mean[0], var[0]


def rollout(ens: TwinEnsemble, reward_fn, policy_fn, s0: np.ndarray, horizon: int):
    """Simulate one trajectory in the learned environment.

    reward_fn(state, action) -> float (normalized outcome); policy_fn(state)
    -> action index. Returns per-step states, actions, rewards, and the
    ensemble variance trace.
    """
    if horizon > MAX_HORIZON:
        raise ValueError(f"horizon must be <= {MAX_HORIZON}")
    out = rollout_batch(ens, reward_fn, policy_fn, np.asarray(s0)[None], horizon)
    return {k: v[0] for k, v in out.items()}


def rollout_batch(ens: TwinEnsemble, reward_fn, policy_fn, s0: np.ndarray,
                  horizon: int):
    """Vectorized rollouts from a batch of initial states.

    reward_fn(states (B,d), actions (B,)) -> (B,) and policy_fn(states
    (B,d)) -> (B,) when batched; scalar fallbacks are promoted. Uses the
    incremental decode caches, so cost grows linearly per step.
    """
    b = s0.shape[0]
    cur = s0.astype(np.float64).copy()
    caches = [DecodeCache(m, b) for m in ens.members]
    states_log = [cur.copy()]
    actions_log, rewards_log, var_log = [], [], []
    for _ in range(horizon):
        acts = np.asarray(policy_fn(cur), dtype=np.int64)
        if acts.shape != (b,) or acts.min() < 0 or acts.max() >= N_ACTIONS:
            raise ValueError("policy emitted an invalid action batch")
        preds = np.stack([cache.step(cur, acts) for cache in caches])
        shifted = preds - preds[0:1]
        mean = np.clip(preds[0] + shifted.mean(axis=0), 0.0, 1.0)
        var = shifted.var(axis=0, ddof=1)
        rew = np.asarray(reward_fn(cur, acts), dtype=np.float64)
        states_log.append(mean)
        actions_log.append(acts)
        rewards_log.append(rew)
        var_log.append(var)
        cur = mean
    return {
        "states": np.stack(states_log, axis=1),           # (B, horizon+1, d)
        "actions": (np.stack(actions_log, axis=1) if actions_log
                    else np.zeros((b, 0), dtype=np.int64)),
        "rewards": (np.stack(rewards_log, axis=1) if rewards_log
                    else np.zeros((b, 0))),
        "variances": (np.stack(var_log, axis=1) if var_log
                      else np.zeros((b, 0, STATE_DIM))),
    }


# -- persistence ------------------------------------------------------------------


def save_ensemble(ens: TwinEnsemble, directory, histories: list[dict] | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"members": [], "width": WIDTH, "blocks": N_BLOCKS, "heads": N_HEADS}
    for i, m in enumerate(ens.members):
        name = f"member_{i}.ckpt"
        meta = {"seed": m.seed}
        if histories:
            meta["best_val_loss"] = histories[i].get("best_val_loss")
        save_checkpoint(directory / name, m.state_dict(), meta)
        manifest["members"].append({"file": name, **meta})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_ensemble(directory) -> TwinEnsemble:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    members = []
    for entry in manifest["members"]:
        tensors, meta = load_checkpoint(directory / entry["file"])
        model = DynamicsModel(seed=int(meta.get("seed", 0)))
        model.load_state_dict(tensors)
        members.append(model)
    return TwinEnsemble(members)
