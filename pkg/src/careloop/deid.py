"""Policy-driven de-identification at data ingress.

Applies Safe-Harbor-style transforms to identified records before anything
else touches them: drops direct identifiers, replaces the MRN with a keyed
pseudonym, generalizes quasi-identifiers (ZIP truncation, age bucketing),
shifts all dates by a bounded per-patient constant, and verifies k-anonymity
over the generalized quasi-identifiers with an append-only audit log.

Fail-closed rule: a record carrying any field the policy does not know is
refused outright. Ingress must never pass through an unanticipated
identifier.
"""

from __future__ import annotations

import datetime
import hashlib
import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path


class DeidError(ValueError):
    """Raised when a record cannot be safely de-identified."""


@dataclass
class DeidPolicy:
    pseudonym_salt: str
    direct_identifier_fields: list[str] = field(
        default_factory=lambda: ["name", "mrn", "zip", "birth_date", "visit_dates"])
    payload_fields: list[str] = field(
        default_factory=lambda: ["gender", "bmi", "n_steps", "patient_id"])
    zip_digits_kept: int = 3
    age_buckets: list[int] = field(default_factory=lambda: list(range(0, 91, 10)))
    date_shift_bound_days: int = 30
    k: int = 5

    def __post_init__(self):
        if self.k < 2:
            raise DeidError("k-anonymity parameter must be >= 2")
        if self.date_shift_bound_days < 1:
            raise DeidError("date_shift_bound_days must be >= 1")
        if sorted(self.age_buckets) != self.age_buckets or self.age_buckets[0] != 0:
            raise DeidError("age buckets must be ascending breakpoints starting at 0")

    @classmethod
    def from_file(cls, path) -> "DeidPolicy":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(**doc)

    def fingerprint(self) -> str:
        doc = {k: v for k, v in vars(self).items() if k != "pseudonym_salt"}
        doc["salt_digest"] = hashlib.sha256(self.pseudonym_salt.encode()).hexdigest()[:12]
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def pseudonym(salt: str, mrn: str) -> str:
    """Deterministic keyed hash of the MRN, truncated to 16 hex chars."""
    return hmac.new(salt.encode(), mrn.encode(), hashlib.sha256).hexdigest()[:16]


def date_offset_days(salt: str, mrn: str, bound: int) -> int:
    """Per-patient constant date shift in [-bound, +bound], derived from the key.

    Zero is excluded: an unshifted date would leak through verbatim.
    """
    digest = hmac.new(salt.encode(), (mrn + "|dates").encode(), hashlib.sha256).digest()
    value = int.from_bytes(digest[:8], "little") % (2 * bound) - bound
    return value + 1 if value >= 0 else value


def age_bucket_label(age_years: int, breakpoints: list[int]) -> str:
    top = breakpoints[-1]
    if age_years >= top:
        return f"{top}+"
    for lo, hi in zip(breakpoints[:-1], breakpoints[1:]):
        if lo <= age_years < hi:
            return f"{lo}-{hi - 1}"
    return f"0-{breakpoints[1] - 1}"


def _shift_date(iso: str, days: int) -> str:
    return (datetime.date.fromisoformat(iso) + datetime.timedelta(days=days)).isoformat()


def deidentify_record(rec: dict, policy: DeidPolicy) -> dict:
    """Transform one RawRecord into a DeidRecord, or refuse it.

    Unknown fields and a missing MRN fail closed. The output never contains
    any direct-identifier field name or value.
    """
    known = set(policy.direct_identifier_fields) | set(policy.payload_fields) | {"age_years"}
    unknown = set(rec) - known
    if unknown:
        raise DeidError(f"record refused: unknown fields {sorted(unknown)}")
    if "mrn" not in rec or not rec["mrn"]:
        raise DeidError("record refused: missing MRN")

    key = pseudonym(policy.pseudonym_salt, str(rec["mrn"]))
    offset = date_offset_days(policy.pseudonym_salt, str(rec["mrn"]),
                              policy.date_shift_bound_days)
    out = {"key": key}
    if "zip" in rec:
        out["zip3"] = str(rec["zip"])[: policy.zip_digits_kept]
    if "age_years" in rec:
        out["age_bucket"] = age_bucket_label(int(rec["age_years"]), policy.age_buckets)
    if "visit_dates" in rec:
        out["visit_dates_shifted"] = [_shift_date(d, offset) for d in rec["visit_dates"]]
    for name in policy.payload_fields:
        if name in rec:
            out[name] = rec[name]
    return out


DEFAULT_QUASI_IDS = ["zip3", "age_bucket", "gender"]


@dataclass
class AnonymityReport:
    ok: bool
    k: int
    quasi_ids: list[str]
    class_sizes: dict[str, int]
    violating_classes: list[str]

    def histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for size in self.class_sizes.values():
            hist[size] = hist.get(size, 0) + 1
        return hist


def _quasi_key(rec: dict, quasi_ids: list[str]) -> str:
    return json.dumps([rec.get(q) for q in quasi_ids])


def kanonymity_check(records: list[dict], quasi_ids: list[str] | None = None,
                     k: int = 5, audit_path=None, policy: DeidPolicy | None = None,
                     suppressed: int = 0) -> AnonymityReport:
    """Group by quasi-identifier tuple and flag every class smaller than k."""
    if k < 2:
        raise DeidError("k must be >= 2")
    if not records:
        raise DeidError("k-anonymity check over an empty record set")
    quasi_ids = quasi_ids or DEFAULT_QUASI_IDS
    sizes: dict[str, int] = {}
    for rec in records:
        key = _quasi_key(rec, quasi_ids)
        sizes[key] = sizes.get(key, 0) + 1
    violating = sorted(key for key, n in sizes.items() if n < k)
    report = AnonymityReport(ok=not violating, k=k, quasi_ids=list(quasi_ids),
                             class_sizes=sizes, violating_classes=violating)
    if audit_path is not None:
        append_audit(audit_path, report, policy, suppressed)
    return report


def append_audit(audit_path, report: AnonymityReport, policy: DeidPolicy | None,
                 suppressed: int):
    entry = {
        "ts": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "k": report.k,
        "quasi_ids": report.quasi_ids,
        "pass": report.ok,
        "n_classes": len(report.class_sizes),
        "n_violating": len(report.violating_classes),
        "class_size_histogram": {str(s): n for s, n in sorted(report.histogram().items())},
        "suppressed": suppressed,
        "policy_hash": policy.fingerprint() if policy else None,
    }
    path = Path(audit_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def suppress_violations(records: list[dict], report: AnonymityReport) -> list[dict]:
    """Drop every record belonging to a violating equivalence class."""
    if report.ok:
        return list(records)
    bad = set(report.violating_classes)
    return [r for r in records if _quasi_key(r, report.quasi_ids) not in bad]


def deidentify_corpus(records: list[dict], policy: DeidPolicy,
                      quasi_ids: list[str] | None = None, audit_path=None):
    """Full ingress pass: transform every record, then enforce k-anonymity.

    Returns (clean_records, final_report). The emitted set always satisfies
    k-anonymity at policy.k; an all-violating corpus comes back empty with
    the audit trail recording the suppression.
    """
    quasi_ids = quasi_ids or DEFAULT_QUASI_IDS
    transformed = [deidentify_record(r, policy) for r in records]
    report = kanonymity_check(transformed, quasi_ids, policy.k,
                              audit_path=audit_path, policy=policy)
    if report.ok:
        return transformed, report
    clean = suppress_violations(transformed, report)
    if not clean:
        if audit_path is not None:
            append_audit(audit_path, report, policy,
                         suppressed=len(transformed))
        return [], report
    final = kanonymity_check(clean, quasi_ids, policy.k, audit_path=audit_path,
                             policy=policy, suppressed=len(transformed) - len(clean))
    return clean, final
