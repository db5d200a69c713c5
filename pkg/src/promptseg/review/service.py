"""HTTP layer over the review store.

All responses are JSON except the image endpoints, which stream PNG files.
The browser UI is served as static assets at the root path.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .store import Candidate, ConflictError, ReviewError, ReviewStore, UnknownCandidateError

STATIC_DIR = Path(__file__).parent / "static"


class VerdictBody(BaseModel):
    candidate_id: str
    decision: str
    annotator_id: str
    reason: str | None = None


def _candidate_view(candidate: Candidate, progress: dict) -> dict:
    return {
        "candidate_id": candidate.candidate_id,
        "prompt": candidate.sample.prompt,
        "concept": candidate.sample.concept.value,
        "ai_suggestion": candidate.ai_suggestion,
        "overlay_url": f"/api/images/{candidate.candidate_id}?variant=overlay",
        "plain_url": f"/api/images/{candidate.candidate_id}?variant=plain",
        "progress": progress,
    }


def create_app(store: ReviewStore, static_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="review service")

    @app.get("/api/candidates/next")
    def next_candidate(session: str = Query(..., min_length=1)):
        candidate = store.next_candidate(session)
        progress = store.progress()
        if candidate is None:
            return {"candidate": None, "progress": progress}
        return {"candidate": _candidate_view(candidate, progress), "progress": progress}

    @app.post("/api/verdicts")
    def post_verdict(body: VerdictBody):
        try:
            record = store.record_verdict(
                body.candidate_id, body.decision, body.annotator_id, reason=body.reason
            )
        except UnknownCandidateError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except ConflictError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except ReviewError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"verdict": record.to_json(), "progress": store.progress()}

    @app.get("/api/images/{candidate_id}")
    def get_image(candidate_id: str, variant: str = Query("overlay")):
        if variant not in ("overlay", "plain"):
            raise HTTPException(status_code=400, detail="variant must be overlay or plain")
        try:
            candidate = store._by_id[candidate_id]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown candidate {candidate_id}") from None
        uri = candidate.overlay_uri if variant == "overlay" else candidate.plain_uri
        if not Path(uri).is_file():
            raise HTTPException(status_code=404, detail=f"image file missing: {uri}")
        return FileResponse(uri, media_type="image/png")

    @app.get("/api/stats")
    def get_stats():
        progress = store.progress()
        agreement = None
        if progress["decided"] > 0:
            agreement = store.agreement_report().to_json()
        return {"queue": progress, "agreement": agreement}

    @app.get("/api/export")
    def get_export():
        samples = store.accepted_samples()
        return JSONResponse(
            {
                "header": {"schema_version": 1, "metadata": {"source": "human_review"}},
                "samples": [s.to_json() for s in samples],
            }
        )

    ui_dir = static_dir if static_dir is not None else STATIC_DIR
    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def serve(store: ReviewStore, port: int = 8701, static_dir: Path | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(store, static_dir), host="127.0.0.1", port=port, log_level="warning")
