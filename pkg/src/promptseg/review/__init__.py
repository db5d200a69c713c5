from .service import create_app
from .store import (
    AgreementStats,
    Candidate,
    ConflictError,
    ReviewStore,
    UnknownCandidateError,
    VerdictRecord,
    build_candidates,
    load_candidates,
    save_candidates,
)

__all__ = [
    "AgreementStats",
    "Candidate",
    "ConflictError",
    "ReviewStore",
    "UnknownCandidateError",
    "VerdictRecord",
    "build_candidates",
    "create_app",
    "load_candidates",
    "save_candidates",
]
