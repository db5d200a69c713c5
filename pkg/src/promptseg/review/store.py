"""Candidate queue and verdict store for human verification.

Verdicts live in an append-only line-delimited JSON log; replaying the log
rebuilds the exact in-memory state, so the log is the single source of
truth across restarts. Assignment uses expiring leases (default ten
minutes) so an abandoned session never locks a candidate forever. All
mutation goes through one lock: no candidate can be assigned to two live
sessions or decided twice.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ..core import DatasetManifest, ManifestError, Sample, save_manifest

DEFAULT_LEASE_SECONDS = 600.0


class ReviewError(RuntimeError):
    pass


class UnknownCandidateError(ReviewError):
    pass


class ConflictError(ReviewError):
    """The candidate was already decided (or is held by another session)."""


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    sample: Sample
    overlay_uri: str
    plain_uri: str
    ai_suggestion: str

    def __post_init__(self):
        if self.ai_suggestion not in ("accept", "reject"):
            raise ReviewError(f"candidate {self.candidate_id}: bad ai_suggestion {self.ai_suggestion!r}")

    def to_json(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "sample": self.sample.to_json(),
            "overlay_uri": self.overlay_uri,
            "plain_uri": self.plain_uri,
            "ai_suggestion": self.ai_suggestion,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        return cls(
            candidate_id=str(obj["candidate_id"]),
            sample=Sample.from_json(obj["sample"]),
            overlay_uri=str(obj["overlay_uri"]),
            plain_uri=str(obj["plain_uri"]),
            ai_suggestion=str(obj["ai_suggestion"]),
        )


@dataclass(frozen=True)
class VerdictRecord:
    candidate_id: str
    decision: str
    annotator_id: str
    decided_at: float
    ai_suggestion_at_decision: str
    reason: str | None = None

    def to_json(self) -> dict:
        out = {
            "candidate_id": self.candidate_id,
            "decision": self.decision,
            "annotator_id": self.annotator_id,
            "decided_at": self.decided_at,
            "ai_suggestion_at_decision": self.ai_suggestion_at_decision,
        }
        if self.reason is not None:
            out["reason"] = self.reason
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "VerdictRecord":
        return cls(
            candidate_id=str(obj["candidate_id"]),
            decision=str(obj["decision"]),
            annotator_id=str(obj["annotator_id"]),
            decided_at=float(obj["decided_at"]),
            ai_suggestion_at_decision=str(obj["ai_suggestion_at_decision"]),
            reason=obj.get("reason"),
        )


@dataclass(frozen=True)
class AgreementStats:
    n_decided: int
    agreement_rate: float
    confusion: dict[str, int]  # keys "ai_<x>/human_<y>"

    def to_json(self) -> dict:
        return {"n_decided": self.n_decided, "agreement_rate": self.agreement_rate, "confusion": self.confusion}


def save_candidates(candidates: list[Candidate], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"schema_version": 1})]
    lines.extend(json.dumps(c.to_json(), sort_keys=True) for c in candidates)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_candidates(path: str | Path) -> list[Candidate]:
    path = Path(path)
    if not path.is_file():
        raise ReviewError(f"candidate manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append(Candidate.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ManifestError) as exc:
            raise ReviewError(f"{path}: line {lineno}: {exc}") from exc
    return out


def build_candidates(
    manifest: DatasetManifest,
    out_dir: str | Path,
    ai_suggestion_fn=None,
) -> list[Candidate]:
    """Render overlay/plain PNGs for every sample and wrap them as
    candidates. ai_suggestion_fn maps a Sample to accept/reject (default:
    accept, mirroring engine output that survived its own verifier)."""
    from ..maskops import load_image_rgb, render_marks_overlay, rle_decode, save_image_rgb

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = []
    for i, sample in enumerate(manifest.samples):
        image = load_image_rgb(sample.image.uri)
        mask = rle_decode(sample.mask)
        plain_uri = out_dir / f"cand_{i:05d}_plain.png"
        overlay_uri = out_dir / f"cand_{i:05d}_overlay.png"
        save_image_rgb(plain_uri, image)
        save_image_rgb(overlay_uri, render_marks_overlay(image, [(1, mask)] if mask.any() else []))
        suggestion = ai_suggestion_fn(sample) if ai_suggestion_fn else "accept"
        candidates.append(
            Candidate(
                candidate_id=f"cand_{i:05d}",
                sample=sample,
                overlay_uri=str(overlay_uri),
                plain_uri=str(plain_uri),
                ai_suggestion=suggestion,
            )
        )
    return candidates


@dataclass
class _Assignment:
    annotator_id: str
    expires_at: float


class ReviewStore:
    def __init__(
        self,
        candidates: list[Candidate],
        verdict_log: str | Path,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        clock=time.monotonic,
    ):
        ids = [c.candidate_id for c in candidates]
        if len(ids) != len(set(ids)):
            raise ReviewError("duplicate candidate ids")
        self.candidates = list(candidates)
        self._by_id = {c.candidate_id: c for c in candidates}
        self.verdict_log = Path(verdict_log)
        self.lease_seconds = lease_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._assignments: dict[str, _Assignment] = {}
        self._verdicts: dict[str, VerdictRecord] = {}
        if self.verdict_log.is_file():
            self._replay()

    def _replay(self) -> None:
        for lineno, line in enumerate(self.verdict_log.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            record = VerdictRecord.from_json(json.loads(line))
            if record.candidate_id not in self._by_id:
                raise ReviewError(f"{self.verdict_log}: line {lineno}: unknown candidate {record.candidate_id}")
            self._verdicts.setdefault(record.candidate_id, record)

    def _append_log(self, record: VerdictRecord) -> None:
        self.verdict_log.parent.mkdir(parents=True, exist_ok=True)
        with open(self.verdict_log, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            f.flush()

    def status(self, candidate_id: str) -> str:
        if candidate_id not in self._by_id:
            raise UnknownCandidateError(candidate_id)
        if candidate_id in self._verdicts:
            return "decided"
        assignment = self._assignments.get(candidate_id)
        if assignment and assignment.expires_at > self._clock():
            return "assigned"
        return "pending"

    def next_candidate(self, annotator_id: str) -> Candidate | None:
        """Oldest pending candidate, leased to the session. A session that
        already holds an undecided lease gets the same candidate back."""
        if not annotator_id:
            raise ReviewError("annotator_id required")
        with self._lock:
            now = self._clock()
            for cid, assignment in self._assignments.items():
                if (
                    assignment.annotator_id == annotator_id
                    and assignment.expires_at > now
                    and cid not in self._verdicts
                ):
                    self._assignments[cid] = _Assignment(annotator_id, now + self.lease_seconds)
                    return self._by_id[cid]
            for candidate in self.candidates:
                cid = candidate.candidate_id
                if cid in self._verdicts:
                    continue
                assignment = self._assignments.get(cid)
                if assignment and assignment.expires_at > now:
                    continue
                self._assignments[cid] = _Assignment(annotator_id, now + self.lease_seconds)
                return candidate
            return None

    def record_verdict(
        self, candidate_id: str, decision: str, annotator_id: str, reason: str | None = None
    ) -> VerdictRecord:
        """Append-only commit; exact duplicate submissions return the stored
        record, anything else on a decided candidate is a conflict."""
        if decision not in ("accept", "reject"):
            raise ReviewError(f"decision must be accept or reject, got {decision!r}")
        with self._lock:
            candidate = self._by_id.get(candidate_id)
            if candidate is None:
                raise UnknownCandidateError(candidate_id)
            existing = self._verdicts.get(candidate_id)
            if existing is not None:
                if existing.decision == decision and existing.annotator_id == annotator_id:
                    return existing
                raise ConflictError(
                    f"candidate {candidate_id} already decided by {existing.annotator_id!r}"
                )
            assignment = self._assignments.get(candidate_id)
            now = self._clock()
            if assignment and assignment.expires_at > now and assignment.annotator_id != annotator_id:
                raise ConflictError(f"candidate {candidate_id} is assigned to another session")
            record = VerdictRecord(
                candidate_id=candidate_id,
                decision=decision,
                annotator_id=annotator_id,
                decided_at=time.time(),
                ai_suggestion_at_decision=candidate.ai_suggestion,
                reason=reason,
            )
            self._append_log(record)
            self._verdicts[candidate_id] = record
            self._assignments.pop(candidate_id, None)
            return record

    def accepted_samples(self) -> list[Sample]:
        return [
            self._by_id[cid].sample
            for cid in (c.candidate_id for c in self.candidates)
            if cid in self._verdicts and self._verdicts[cid].decision == "accept"
        ]

    def export_accepted(self, out_path: str | Path) -> DatasetManifest:
        """Manifest of exactly the accepted candidates; rejected ones are
        discarded, never edited."""
        manifest = DatasetManifest(samples=self.accepted_samples(), metadata={"source": "human_review"})
        save_manifest(manifest, out_path)
        return manifest

    def agreement_report(self) -> AgreementStats:
        with self._lock:
            records = list(self._verdicts.values())
        if not records:
            raise ReviewError("no decided candidates")
        confusion = {
            "ai_accept/human_accept": 0,
            "ai_accept/human_reject": 0,
            "ai_reject/human_accept": 0,
            "ai_reject/human_reject": 0,
        }
        agree = 0
        for record in records:
            confusion[f"ai_{record.ai_suggestion_at_decision}/human_{record.decision}"] += 1
            agree += record.decision == record.ai_suggestion_at_decision
        return AgreementStats(
            n_decided=len(records), agreement_rate=agree / len(records), confusion=confusion
        )

    def progress(self) -> dict:
        with self._lock:
            now = self._clock()
            decided = len(self._verdicts)
            assigned = sum(
                1
                for cid, a in self._assignments.items()
                if a.expires_at > now and cid not in self._verdicts
            )
            return {
                "total": len(self.candidates),
                "decided": decided,
                "assigned": assigned,
                "pending": len(self.candidates) - decided - assigned,
                "accepted": sum(1 for v in self._verdicts.values() if v.decision == "accept"),
                "rejected": sum(1 for v in self._verdicts.values() if v.decision == "reject"),
            }
