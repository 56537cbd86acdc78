"""Rule-based safety gate: vital-sign ranges, contraindications, critical floor.

The verdict is strict: any violation at all (including a purely
state-attributable out-of-range vital) fails the gate and supplies the
conservative fallback. For policy scoring, `blocking_violations` isolates
the subset a different action choice could have avoided — contraindicated
drugs and non-conservative proposals under critically low oxygen — since an
out-of-range vital fails every action including the fallback itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .cohort import ACTIONS, FIDX, PLACEBO


def _load_rules() -> dict:
    with resources.files("careloop.data").joinpath("safety_rules.json").open() as fh:
        return json.load(fh)


RULES = _load_rules()


@dataclass
class SafetyVerdict:
    passed: bool
    violations: list[str] = field(default_factory=list)
    fallback: int | None = None
    force_query: bool = False

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violations": list(self.violations),
                "fallback": self.fallback, "force_query": self.force_query}


def range_flags(state: np.ndarray) -> dict[str, str]:
    """Per-vital normal/low/abnormal flags from the gate ranges."""
    flags = {}
    for name, (lo, hi) in RULES["vital_ranges"].items():
        v = state[FIDX[name]]
        flags[name] = "low" if v < lo else ("abnormal" if v > hi else "normal")
    return flags


def blocking_violations(state: np.ndarray, action: int) -> list[str]:
    """Violations attributable to the proposed action itself."""
    out = []
    for rule in RULES["contraindications"]:
        if ACTIONS[action] != rule["action"]:
            continue
        v = state[FIDX[rule["feature"]]]
        if ("above" in rule and v > rule["above"]) or \
           ("below" in rule and v < rule["below"]):
            out.append(rule["rule_id"])
    if state[FIDX["spo2"]] < RULES["critical_spo2"] and action != PLACEBO:
        out.append("spo2-critical")
    return out


def safety_gate(state: np.ndarray, action: int) -> SafetyVerdict:
    """Check the proposal against every rule; failures force the fallback."""
    state = np.asarray(state, dtype=np.float64)
    violations = []
    for name, (lo, hi) in RULES["vital_ranges"].items():
        v = state[FIDX[name]]
        if v < lo or v > hi:
            prefix = {"blood_pressure": "bp", "heart_rate": "hr"}.get(name, name)
            violations.append(f"{prefix}-range")
    for rule_id in blocking_violations(state, action):
        if rule_id not in violations:
            violations.append(rule_id)
    force = bool(state[FIDX["spo2"]] < RULES["critical_spo2"])
    if force and "spo2-critical" not in violations:
        violations.append("spo2-critical")
    passed = not violations
    return SafetyVerdict(
        passed=passed,
        violations=violations,
        fallback=None if passed else PLACEBO,
        force_query=force,
    )


def proposal_passes(state: np.ndarray, action: int) -> bool:
    """Pre-substitution pass for policy scoring: no action-attributable block."""
    return not blocking_violations(np.asarray(state, dtype=np.float64), action)
