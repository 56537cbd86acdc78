"""Counterfactual outcome model with an adversarial treatment discriminator.

The encoder maps a state to a health representation z; the head combines z
with an action embedding to predict the immediate outcome. A discriminator
tries to recover the treatment from z alone, and the encoder is trained to
confuse it (entropy maximization), so the health representation carries as
little treatment information as possible.

Reward z-scoring statistics are fit on the training split once, persisted,
and required by everything downstream; refusing to run without them is the
point.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import N_ACTIONS, PLACEBO, STATE_DIM, Transition
from .nn import (
    AdamW, Embedding, MLP, Module, Tensor, concatenate, cross_entropy,
    entropy_of_softmax, load_checkpoint, no_grad, save_checkpoint,
)

Z_DIM = 32
ACTION_EMB_DIM = 16


class OutcomeModel(Module):
    def __init__(self, seed: int = 0, lambda_adv: float = 0.1):
        if lambda_adv is not None and lambda_adv < 0:
            raise ValueError("adversarial weight must be >= 0")
        rng = np.random.default_rng([seed, 0x0D0C])
        self.seed = seed
        self.lambda_adv = lambda_adv
        self.encoder = MLP([STATE_DIM, 64, Z_DIM], rng)
        self.action_emb = Embedding(N_ACTIONS, ACTION_EMB_DIM, rng)
        self.head = MLP([Z_DIM + ACTION_EMB_DIM, 64, 1], rng)
        self.discriminator = MLP([Z_DIM, 32, N_ACTIONS], rng)

    def z_health(self, states: np.ndarray) -> Tensor:
        return self.encoder(Tensor(np.atleast_2d(states)))

    def predict_t(self, states: np.ndarray, actions: np.ndarray) -> Tensor:
        z = self.z_health(states)
        emb = self.action_emb(np.asarray(actions, dtype=np.int64))
        return self.head(concatenate([z, emb], axis=-1)).reshape(-1)

    def predict(self, states: np.ndarray, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (states.shape[0],))
        with no_grad():
            return self.predict_t(states, actions).data.copy()

    def model_parameters(self):
        named = self.named_parameters()
        return [(n, p) for n, p in named if not n.startswith("discriminator")]

    def discriminator_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("discriminator")]


def treatment_effect(model: OutcomeModel, state: np.ndarray, action: int) -> float:
    """Predicted outcome gap vs. the conservative reference for the same state."""
    if action == PLACEBO:
        return 0.0
    s = np.atleast_2d(state)
    return float(model.predict(s, action)[0] - model.predict(s, PLACEBO)[0])


# -- reward normalization -----------------------------------------------------


class MissingStatsError(RuntimeError):
    """Raised when normalization is attempted without fitted statistics."""


@dataclass(frozen=True)
class RewardNormStats:
    mu: float
    sigma: float
    fingerprint: str

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump({"mu": self.mu, "sigma": self.sigma,
                       "fingerprint": self.fingerprint}, fh, sort_keys=True)

    @staticmethod
    def load(path) -> "RewardNormStats":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingStatsError(f"reward stats not found at {path}") from exc
        return RewardNormStats(doc["mu"], doc["sigma"], doc["fingerprint"])


def split_fingerprint(manifest: dict) -> str:
    blob = json.dumps({"seed": manifest["seed"],
                       "train": manifest["splits"]["train"]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def compute_reward_stats(train_transitions: list[Transition], manifest: dict) -> RewardNormStats:
    rewards = np.array([tr.reward for tr in train_transitions])
    return RewardNormStats(float(rewards.mean()), float(rewards.std()),
                           split_fingerprint(manifest))


def normalize_reward(r, stats: RewardNormStats | None):
    if stats is None:
        raise MissingStatsError("reward normalization stats are required; "
                                "training on unnormalized rewards is forbidden")
    return (r - stats.mu) / stats.sigma


def denormalize_reward(r_tilde, stats: RewardNormStats):
    return r_tilde * stats.sigma + stats.mu


# -- training -------------------------------------------------------------------


@dataclass
class OutcomeTrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 5


def _arrays(transitions: list[Transition]):
    x = np.array([tr.state for tr in transitions])
    a = np.array([tr.action for tr in transitions], dtype=np.int64)
    y = np.array([tr.reward for tr in transitions])
    return x, a, y


def train_outcome(train_transitions: list[Transition],
                  val_transitions: list[Transition],
                  lambda_adv: float = 0.1, seed: int = 0,
                  config: OutcomeTrainConfig | None = None):
    """Alternating minimax fit; returns (model at best val MAE, history).

    Each batch: the discriminator ascends action log-likelihood from a
    detached z, then the outcome side descends L1 error plus the
    lambda-weighted confusion term (discriminator frozen). lambda_adv = 0 is
    allowed for tests and reduces to plain L1 regression.
    """
    if lambda_adv < 0:
        raise ValueError("lambda_adv must be >= 0")
    config = config or OutcomeTrainConfig()
    model = OutcomeModel(seed=seed, lambda_adv=lambda_adv)
    opt_model = AdamW(model.model_parameters(), lr=config.lr,
                      weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    opt_disc = AdamW(model.discriminator_parameters(), lr=config.lr,
                     weight_decay=0.0, clip_norm=config.clip_norm)
    rng = np.random.default_rng([seed, 0xADE])
    x, a, y = _arrays(train_transitions)
    xv, av, yv = _arrays(val_transitions)
    ln_k = float(np.log(N_ACTIONS))

    best_mae = np.inf
    best_state = model.state_dict()
    bad = 0
    history = {"val_mae": []}
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            xb, ab, yb = x[idx], a[idx], y[idx]
            if lambda_adv > 0:
                z_const = Tensor(model.z_health(xb).data)
                logits = model.discriminator(z_const)
                dloss = cross_entropy(logits, ab)
                if not np.isfinite(dloss.data).all():
                    raise FloatingPointError("non-finite discriminator loss")
                model.zero_grad()
                dloss.backward()
                opt_disc.step()
            z = model.z_health(xb)
            emb = model.action_emb(ab)
            pred = model.head(concatenate([z, emb], axis=-1)).reshape(-1)
            loss = (pred - Tensor(yb)).abs().mean()
            if lambda_adv > 0:
                # encoder maximizes discriminator entropy; opt_model does not
                # own the discriminator, so it stays fixed during this step
                confusion = ln_k - entropy_of_softmax(model.discriminator(z))
                loss = loss + lambda_adv * confusion
            model.zero_grad()
            loss.backward()
            opt_model.step()
        val_mae = float(np.abs(model.predict(xv, av) - yv).mean())
        history["val_mae"].append(val_mae)
        if val_mae < best_mae - 1e-9:
            best_mae = val_mae
            best_state = model.state_dict()
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    history["best_val_mae"] = best_mae
    return model, history


# -- evaluation helpers -----------------------------------------------------------


def calibration_report(predictions: np.ndarray, targets: np.ndarray,
                       bins: int = 10) -> tuple[float, float]:
    """(ECE, MCE) over equal-width prediction-value bins; empty bins excluded."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    lo, hi = predictions.min(), predictions.max()
    if hi <= lo:
        gap = abs(float(predictions.mean() - targets.mean()))
        return gap, gap
    edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.digitize(predictions, edges[1:-1]), 0, bins - 1)
    ece, mce, n = 0.0, 0.0, len(predictions)
    for b in range(bins):
        sel = which == b
        nb = int(sel.sum())
        if nb == 0:
            continue
        gap = abs(float(predictions[sel].mean() - targets[sel].mean()))
        ece += (nb / n) * gap
        mce = max(mce, gap)
    return ece, mce


def train_action_probe(features: np.ndarray, actions: np.ndarray,
                       features_val: np.ndarray, actions_val: np.ndarray,
                       seed: int = 0, epochs: int = 20, lr: float = 3e-3) -> float:
    """Fit a small classifier action <- features; returns held-out accuracy.

    Used to measure treatment leakage: run once on z_health, once on raw
    states, and compare.
    """
    rng = np.random.default_rng([seed, 0xBEEF])
    probe = MLP([features.shape[1], 32, N_ACTIONS], rng)
    opt = AdamW(probe.named_parameters(), lr=lr, weight_decay=0.0, clip_norm=1.0)
    order_rng = np.random.default_rng([seed, 0xFACE])
    for _ in range(epochs):
        order = order_rng.permutation(len(features))
        for i in range(0, len(order), 512):
            idx = order[i:i + 512]
            logits = probe(Tensor(features[idx]))
            loss = cross_entropy(logits, actions[idx])
            probe.zero_grad()
            loss.backward()
            opt.step()
    with no_grad():
        pred = probe(Tensor(features_val)).data.argmax(axis=1)
    return float((pred == actions_val).mean())


# -- persistence -------------------------------------------------------------------


def save_outcome(model: OutcomeModel, path, meta: dict | None = None):
    base = {"seed": model.seed, "lambda_adv": model.lambda_adv}
    base.update(meta or {})
    save_checkpoint(path, model.state_dict(), base)


def load_outcome(path) -> OutcomeModel:
    tensors, meta = load_checkpoint(path)
    model = OutcomeModel(seed=int(meta.get("seed", 0)),
                         lambda_adv=float(meta.get("lambda_adv", 0.1)))
    model.load_state_dict(tensors)
    return model
