"""Synthetic clinical environment and dataset generator.

All generator constants (treatment-effect matrix, interaction rules, reward
weights, behavior-policy weights) live in ``data/generator_params.json`` so
tests can recompute every quantity from the same committed table the
generator uses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FEATURES = [
    "blood_pressure", "heart_rate", "glucose", "creatinine", "hemoglobin",
    "temperature", "spo2", "age", "gender", "bmi",
]
FIDX = {name: i for i, name in enumerate(FEATURES)}
ACTIONS = ["MedA", "MedB", "MedC", "Combo", "Placebo"]
N_ACTIONS = 5
PLACEBO = 4
STATE_DIM = 10
MAX_HORIZON = 50


def _load_params() -> dict:
    with resources.files("careloop.data").joinpath("generator_params.json").open() as fh:
        return json.load(fh)


PARAMS = _load_params()


def effect_table_hash() -> str:
    blob = json.dumps(PARAMS, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Transition:
    patient_id: int
    t: int
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    reward_parts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        # full float repr: values must round-trip exactly through the file
        return json.dumps({
            "patient_id": self.patient_id,
            "t": self.t,
            "state": [float(v) for v in self.state],
            "action": self.action,
            "reward": float(self.reward),
            "reward_parts": {k: float(v) for k, v in self.reward_parts.items()},
            "next_state": [float(v) for v in self.next_state],
            "done": self.done,
        })

    @staticmethod
    def from_json(line: str) -> "Transition":
        d = json.loads(line)
        return Transition(
            patient_id=d["patient_id"], t=d["t"],
            state=np.asarray(d["state"], dtype=np.float64),
            action=int(d["action"]), reward=float(d["reward"]),
            next_state=np.asarray(d["next_state"], dtype=np.float64),
            done=bool(d["done"]),
            reward_parts=d.get("reward_parts", {}),
        )


def sample_initial_state(rng: np.random.Generator) -> np.ndarray:
    state = np.empty(STATE_DIM)
    for name, spec in PARAMS["initial_state"].items():
        i = FIDX[name]
        if spec["dist"] == "normal":
            state[i] = rng.normal(spec["mean"], spec["std"])
        elif spec["dist"] == "folded_high":
            state[i] = spec["top"] - abs(rng.normal(0.0, spec["std"]))
        elif spec["dist"] == "uniform":
            state[i] = rng.uniform(spec["low"], spec["high"])
        elif spec["dist"] == "bernoulli":
            state[i] = float(rng.random() < spec["p"])
        else:
            raise ValueError(f"unknown distribution {spec['dist']}")
    return np.clip(state, 0.0, 1.0)


def behavior_weights(state: np.ndarray) -> np.ndarray:
    """Unnormalized condition-adaptive action weights from the committed table."""
    bp = PARAMS["behavior_policy"]
    w = np.array([bp["baseline_weights"][a] for a in ACTIONS])
    for rule in bp["modifiers"]:
        v = state[FIDX[rule["feature"]]]
        hit = (("above" in rule and v > rule["above"])
               or ("below" in rule and v < rule["below"]))
        if hit:
            w[ACTIONS.index(rule["action"])] *= rule["factor"]
    combo = bp["combo_modifier"]
    hot = sum(state[FIDX[f]] > combo["above"] for f in combo["hot_features"])
    if hot >= combo["min_count"]:
        w[ACTIONS.index("Combo")] *= combo["factor"]
    return w


def behavior_probs(state: np.ndarray) -> np.ndarray:
    w = behavior_weights(state)
    return w / w.sum()


def behavior_action(state: np.ndarray, rng: np.random.Generator) -> int:
    return int(rng.choice(N_ACTIONS, p=behavior_probs(state)))


def deterministic_delta(state: np.ndarray, action: int) -> np.ndarray:
    """Noise-free state change: base treatment effect + interaction terms."""
    delta = np.asarray(PARAMS["base_effects"][ACTIONS[action]], dtype=np.float64).copy()
    for name, coef in PARAMS["homeostasis"].items():
        i = FIDX[name]
        delta[i] += coef * (0.5 - state[i])
    for rule in PARAMS.get("progressions", []):
        if state[FIDX[rule["when_feature"]]] > rule["above"]:
            delta[FIDX[rule["affects"]]] += rule["delta"]
    sd = PARAMS["spo2_dynamics"]
    s_i, g_i = FIDX["spo2"], FIDX["glucose"]
    if state[s_i] < sd["spiral_threshold"]:
        # respiratory failure spiral: recovery no longer reachable
        delta[s_i] -= sd["spiral_decay"]
    elif state[g_i] > sd["hypoxia_glucose_threshold"]:
        delta[s_i] -= sd["hypoxia_decay"]
    else:
        delta[s_i] += sd["recovery_rate"] * (sd["recovery_target"] - state[s_i])
    for rule in PARAMS["overdose_effects"]:
        if ACTIONS[action] != rule["action"]:
            continue
        v = state[FIDX[rule["when_feature"]]]
        hit = ((rule.get("when_above") is not None and v > rule["when_above"])
               or (rule.get("when_below") is not None and v < rule["when_below"]))
        if hit:
            delta[FIDX[rule["affects"]]] += rule["delta"]
    return delta


def reward_parts(state: np.ndarray, next_state: np.ndarray, action: int) -> dict:
    """Decomposed reward: penalty + bonus + cost sum exactly to the reward.

    The improvement bonus is judged on the treatment-attributable (noise-free)
    part of the step, so sensor jitter cannot flip it; the range penalty and
    oxygen bonus read the realized next state.
    """
    rw = PARAMS["reward"]
    target = rw["target"]
    attributable = np.clip(state + deterministic_delta(state, action), 0.0, 1.0)
    penalty = 0.0
    bonus = 0.0
    for name, weight in rw["penalty_weights"].items():
        i = FIDX[name]
        penalty -= weight * abs(next_state[i] - target)
        if abs(attributable[i] - target) < abs(state[i] - target):
            bonus += rw["improvement_bonus"]
    if next_state[FIDX["spo2"]] > rw["oxygen_bonus_threshold"]:
        bonus += rw["oxygen_bonus"]
    cost = -rw["action_costs"][ACTIONS[action]]
    return {"penalty": penalty, "bonus": bonus, "cost": cost}


def env_step(state: np.ndarray, action: int, rng: np.random.Generator | None,
             t: int | None = None, horizon: int = MAX_HORIZON):
    """One generator step: (next_state, reward, done, parts).

    Passing rng=None disables transition noise (used by oracles). When `t`
    is given, the horizon cut contributes to `done`; otherwise only the
    low-oxygen early termination does.
    """
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action index {action}")
    delta = deterministic_delta(state, action)
    if rng is not None:
        noise = np.zeros(STATE_DIM)
        for name in PARAMS["noise_features"]:
            noise[FIDX[name]] = rng.normal(0.0, PARAMS["noise_std"])
        delta = delta + noise
    next_state = np.clip(state + delta, 0.0, 1.0)
    parts = reward_parts(state, next_state, action)
    reward = parts["penalty"] + parts["bonus"] + parts["cost"]
    done = bool(next_state[FIDX["spo2"]] < PARAMS["termination_spo2"])
    if t is not None and t + 1 >= horizon:
        done = True
    return next_state, reward, done, parts


def patient_rng(seed: int, patient_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, patient_id])


def rollout_patient(patient_id: int, seed: int, horizon: int = MAX_HORIZON,
                    age_offset: float = 0.0) -> list[Transition]:
    rng = patient_rng(seed, patient_id)
    state = sample_initial_state(rng)
    if age_offset:
        state[FIDX["age"]] = min(1.0, max(0.0, state[FIDX["age"]] + age_offset))
    out = []
    for t in range(horizon):
        action = behavior_action(state, rng)
        next_state, reward, done, parts = env_step(state, action, rng, t=t, horizon=horizon)
        out.append(Transition(patient_id, t, state, action, reward, next_state, done, parts))
        if done:
            break
        state = next_state
    return out


def generate_cohort(n_patients: int, horizon: int = MAX_HORIZON, seed: int = 0,
                    out_path: str | Path | None = None, age_offset: float = 0.0,
                    train_fraction: float = 0.8,
                    with_identifiers: bool = False):
    """Roll out the behavior policy for n_patients and serialize the dataset.

    Returns (transitions, manifest). When out_path is given, writes
    ``<out_path>`` as JSON-Lines plus ``<out_path>.manifest.json``; with
    identifier synthesis enabled, also ``<out_path>.raw_records.jsonl`` for
    the de-identification stage.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if horizon > MAX_HORIZON:
        raise ValueError(f"horizon must be <= {MAX_HORIZON}")
    transitions: list[Transition] = []
    for pid in range(n_patients):
        transitions.extend(rollout_patient(pid, seed, horizon, age_offset))

    split_rng = np.random.default_rng([seed, 0xC0FFEE])
    order = split_rng.permutation(n_patients)
    n_train = int(round(train_fraction * n_patients))
    manifest = {
        "seed": seed,
        "n_patients": n_patients,
        "horizon": horizon,
        "age_offset": age_offset,
        "generator_version": PARAMS["version"],
        "effect_table_sha256": effect_table_hash(),
        "n_transitions": len(transitions),
        "splits": {
            "train": sorted(int(p) for p in order[:n_train]),
            "val": sorted(int(p) for p in order[n_train:]),
        },
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as fh:
            for tr in transitions:
                fh.write(tr.to_json() + "\n")
        with open(str(out_path) + ".manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if with_identifiers:
            raws = synthesize_raw_records(transitions, seed)
            with open(str(out_path) + ".raw_records.jsonl", "w") as fh:
                for rec in raws:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return transitions, manifest


def load_cohort(path: str | Path):
    path = Path(path)
    with open(path) as fh:
        transitions = [Transition.from_json(line) for line in fh if line.strip()]
    with open(str(path) + ".manifest.json") as fh:
        manifest = json.load(fh)
    return transitions, manifest


def split_transitions(transitions: list[Transition], manifest: dict):
    train_ids = set(manifest["splits"]["train"])
    train = [t for t in transitions if t.patient_id in train_ids]
    val = [t for t in transitions if t.patient_id not in train_ids]
    return train, val


_FIRST = ["Alice", "Bruno", "Carmen", "Deniz", "Elena", "Farid", "Grace", "Hugo",
          "Ines", "Jonas", "Katya", "Luis", "Mara", "Nadia", "Omar", "Priya"]
_LAST = ["Alvarez", "Berg", "Chen", "Dubois", "Eriksen", "Fischer", "Garcia",
         "Haas", "Ivanov", "Jensen", "Kim", "Lopez", "Moreau", "Novak", "Okafor", "Petrov"]
# hospital catchment area: a handful of ZIP codes, as a single site would see
_ZIPS = ["02138", "02139", "02140", "02141", "02445", "02446", "01902", "01905"]


def synthesize_raw_records(transitions: list[Transition], seed: int) -> list[dict]:
    """Fake identified per-patient records so the de-id stage runs end-to-end."""
    lo, hi = PARAMS["age_years_span"]
    by_patient: dict[int, list[Transition]] = {}
    for tr in transitions:
        by_patient.setdefault(tr.patient_id, []).append(tr)
    records = []
    for pid, trs in sorted(by_patient.items()):
        rng = np.random.default_rng([seed, pid, 0x1D])
        first = trs[0]
        age_years = int(round(lo + first.state[FIDX["age"]] * (hi - lo)))
        birth_year = 2024 - age_years
        admit_day = int(rng.integers(0, 300))
        records.append({
            "name": f"{_FIRST[int(rng.integers(0, 16))]} {_LAST[int(rng.integers(0, 16))]}",
            "mrn": f"{int(rng.integers(10_000_000, 100_000_000))}",
            "zip": _ZIPS[int(rng.integers(0, len(_ZIPS)))],
            "birth_date": f"{birth_year:04d}-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}",
            "visit_dates": [_iso(2024, admit_day), _iso(2024, admit_day + len(trs))],
            "age_years": age_years,
            "gender": "F" if first.state[FIDX["gender"]] < 0.5 else "M",
            "bmi": round(float(first.state[FIDX["bmi"]]), 6),
            "n_steps": len(trs),
            "patient_id": pid,
        })
    return records


def _iso(year: int, day_index: int) -> str:
    import datetime
    return (datetime.date(year, 1, 1) + datetime.timedelta(days=int(day_index))).isoformat()
