"""Training-plan approval ledger.

Every plan is identified by the SHA-256 of its canonical bytes. Unknown
plans arriving in a train request are recorded as Pending so reviewers see
them; decisions are immutable once taken.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import AlreadyDecided, HashMismatch, MalformedBlob, UnknownPlan
from ..protocol import TrainingPlan, canonical_bytes, compute_plan_hash
from ..util import atomic_write_text

LEDGER_FORMAT_VERSION = "1"

STATUS_PENDING = "pending"
STATUS_APPROVED = "approved"
STATUS_REJECTED = "rejected"


@dataclass(frozen=True)
class ApprovalRecord:
    plan_hash: str  # lowercase hex
    plan_snapshot: TrainingPlan
    status: str
    reviewer_note: str = ""
    decided_at: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "plan_hash": self.plan_hash,
            "plan_snapshot": self.plan_snapshot.to_dict(),
            "status": self.status,
            "reviewer_note": self.reviewer_note,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, data) -> "ApprovalRecord":
        try:
            return cls(plan_hash=data["plan_hash"],
                       plan_snapshot=TrainingPlan.from_dict(data["plan_snapshot"]),
                       status=data["status"],
                       reviewer_note=data.get("reviewer_note", ""),
                       decided_at=data.get("decided_at"))
        except (KeyError, TypeError) as exc:
            raise MalformedBlob(f"bad approval record: {exc}") from exc


class ApprovalLedger:
    def __init__(self, path, clock=None):
        self.path = Path(path)
        self._clock = clock
        self._lock = threading.Lock()
        self._records: dict = {}
        self._load()

    def _load(self) -> None:
        if not self.path.is_file():
            return
        try:
            doc = json.loads(self.path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedBlob(f"corrupt approval ledger: {exc}") from exc
        if doc.get("format_version") != LEDGER_FORMAT_VERSION:
            raise MalformedBlob("unsupported approval ledger version")
        for raw in doc.get("records", []):
            record = ApprovalRecord.from_dict(raw)
            self._records[record.plan_hash] = record

    def _persist(self) -> None:
        doc = {"format_version": LEDGER_FORMAT_VERSION,
               "records": [r.to_dict() for _, r in sorted(self._records.items())]}
        atomic_write_text(self.path, json.dumps(doc, indent=2, sort_keys=True))

    def ensure_pending(self, plan: TrainingPlan) -> ApprovalRecord:
        """Record an unseen plan as Pending; no-op for known plans."""
        digest = compute_plan_hash(plan).digest
        with self._lock:
            record = self._records.get(digest)
            if record is None:
                record = ApprovalRecord(plan_hash=digest, plan_snapshot=plan,
                                        status=STATUS_PENDING)
                self._records[digest] = record
                self._persist()
            return record

    def status_for(self, plan_hash_hex: str) -> Optional[str]:
        record = self._records.get(plan_hash_hex)
        return None if record is None else record.status

    def get(self, plan_hash_hex: str) -> ApprovalRecord:
        record = self._records.get(plan_hash_hex)
        if record is None:
            raise UnknownPlan(f"no plan with hash {plan_hash_hex}")
        return record

    def review(self, plan_hash_hex: str, decision: str,
               note: str = "") -> ApprovalRecord:
        """Decide a Pending record; decided records are immutable."""
        if decision not in (STATUS_APPROVED, STATUS_REJECTED):
            raise MalformedBlob(f"decision must be approved or rejected, "
                                f"got {decision!r}")
        with self._lock:
            record = self._records.get(plan_hash_hex)
            if record is None:
                raise UnknownPlan(f"no plan with hash {plan_hash_hex}")
            if record.status != STATUS_PENDING:
                raise AlreadyDecided(
                    f"plan {plan_hash_hex} already {record.status}")
            decided_at = self._clock.now_ms() if self._clock is not None else None
            decided = ApprovalRecord(plan_hash=record.plan_hash,
                                     plan_snapshot=record.plan_snapshot,
                                     status=decision, reviewer_note=note,
                                     decided_at=decided_at)
            self._records[plan_hash_hex] = decided
            self._persist()
            return decided

    def list_records(self) -> list:
        return [self._records[k] for k in sorted(self._records)]

    def canonical_plan_text(self, plan_hash_hex: str) -> str:
        """The exact hashed bytes, for client-side hash recomputation."""
        record = self.get(plan_hash_hex)
        text = canonical_bytes(record.plan_snapshot).decode("utf-8")
        if compute_plan_hash(record.plan_snapshot).digest != record.plan_hash:
            raise HashMismatch(f"ledger entry {plan_hash_hex} is inconsistent")
        return text
