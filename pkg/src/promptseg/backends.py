"""Clients for the three external model services the data engine consumes:
a vision-language model (VLM), an open-vocabulary detector, and a promptable
segmenter.

Every client implements a small protocol, so the engine never knows whether
it is talking to a hosted endpoint or to one of the deterministic mocks
shipped here. Mocks are first-class: fixture files are keyed by the SHA-256
of the canonical JSON form of the request, rule files cover engine-scale
scripting, and seeded mocks synthesize responses as a pure function of
(request content, seed). The whole engine test suite runs offline.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import io
import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .maskops import BoundingBox, MaskRLE, as_mask, rle_decode

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    """Retryable failure (timeout, 5xx, connection reset)."""


class NoDetectionError(BackendError):
    """The detector found nothing for a description; the caller should drop
    the description, not crash."""


class SchemaParseError(BackendError):
    """Response violated the demanded schema. Carries the raw text."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class ResponseSchema(str, enum.Enum):
    FREE_TEXT = "free_text"
    JSON_OBJECT = "json_object"
    ACCEPT_REJECT = "accept_reject"


@dataclass(frozen=True)
class VlmRequest:
    system_text: str = ""
    user_text: str = ""
    images: tuple[np.ndarray, ...] = ()
    response_schema: ResponseSchema = ResponseSchema.FREE_TEXT

    def __post_init__(self):
        if not self.user_text and not self.images:
            raise ValueError("VlmRequest needs user_text or images")
        if len(self.images) > 4:
            raise ValueError("at most 4 images per request")


@dataclass(frozen=True)
class VlmResponse:
    text: str
    parsed: object | None = None
    latency_ms: float = 0.0


@dataclass(frozen=True)
class SegmenterCandidate:
    mask: np.ndarray
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("candidate score must be finite")


@dataclass
class BackendConfig:
    endpoint: str = ""
    api_key_env: str = ""
    model: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 3
    retry_backoff_ms: int = 250
    seed: int | None = None
    fixtures_dir: str | None = None
    extra_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")


def image_key(image: np.ndarray) -> str:
    """Stable content hash of an image or mask array."""
    arr = np.ascontiguousarray(image)
    digest = hashlib.sha256()
    digest.update(str(arr.shape).encode())
    digest.update(str(arr.dtype).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


def canonical_request(req: VlmRequest) -> dict:
    return {
        "system_text": req.system_text,
        "user_text": req.user_text,
        "images": [image_key(img) for img in req.images],
        "response_schema": req.response_schema.value,
    }


def request_fingerprint(req: VlmRequest) -> str:
    payload = json.dumps(canonical_request(req), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def parse_vlm_text(text: str, schema: ResponseSchema):
    """Parse response text under the demanded schema, or raise with the raw text."""
    if schema is ResponseSchema.FREE_TEXT:
        return None
    if schema is ResponseSchema.JSON_OBJECT:
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaParseError(f"expected JSON, got unparseable text: {exc}", raw_text=text) from exc
    if schema is ResponseSchema.ACCEPT_REJECT:
        word = text.strip().lower()
        first = word.split()[0].strip(".,:;!") if word else ""
        if word in ("accept", "reject"):
            return word
        if first in ("accept", "reject"):
            return first
        raise SchemaParseError("expected accept/reject verdict", raw_text=text)
    raise ValueError(f"unknown schema {schema}")


# ---------------------------------------------------------------------------
# Client protocols
# ---------------------------------------------------------------------------


class VlmClient(Protocol):
    def complete(self, req: VlmRequest) -> str: ...


class DetectorClient(Protocol):
    def detect(self, image: np.ndarray, text: str) -> BoundingBox: ...


class SegmenterClient(Protocol):
    def segment_box(self, image: np.ndarray, box: BoundingBox) -> SegmenterCandidate: ...

    def segment_points(self, image: np.ndarray, points: list[tuple[int, int]]) -> list[SegmenterCandidate]: ...


def _with_retries(cfg: BackendConfig, what: str, call):
    attempts = 0
    while True:
        attempts += 1
        try:
            result = call()
            if attempts > 1:
                log.info("%s succeeded on attempt %d", what, attempts)
            return result
        except TransientBackendError as exc:
            log.warning("%s attempt %d/%d failed: %s", what, attempts, cfg.max_retries + 1, exc)
            if attempts > cfg.max_retries:
                raise BackendError(f"{what} failed after {attempts} attempts: {exc}") from exc
            time.sleep(cfg.retry_backoff_ms * (2 ** (attempts - 1)) / 1000.0)


# ---------------------------------------------------------------------------
# Top-level operations
# ---------------------------------------------------------------------------


def vlm_complete(cfg: BackendConfig, req: VlmRequest, client: VlmClient | None = None) -> VlmResponse:
    """Complete a VLM request with retry-on-transient-failure and schema parsing."""
    client = client if client is not None else make_vlm_client(cfg)
    start = time.monotonic()
    text = _with_retries(cfg, "vlm_complete", lambda: client.complete(req))
    latency = (time.monotonic() - start) * 1000.0
    parsed = parse_vlm_text(text, req.response_schema)
    return VlmResponse(text=text, parsed=parsed, latency_ms=latency)


def detect_region(
    cfg: BackendConfig, image: np.ndarray, text: str, client: DetectorClient | None = None
) -> BoundingBox:
    """Detect a box for a region description; out-of-bounds boxes are clamped."""
    if not text:
        raise ValueError("empty detection text")
    client = client if client is not None else make_detector_client(cfg)
    box = _with_retries(cfg, "detect_region", lambda: client.detect(image, text))
    h, w = image.shape[:2]
    clamped = box.clamped(h, w)
    if clamped != box:
        log.warning("detector box %s out of %dx%d bounds; clamped to %s", box, h, w, clamped)
    return clamped


def segment_from_box(
    cfg: BackendConfig, image: np.ndarray, box: BoundingBox, client: SegmenterClient | None = None
) -> SegmenterCandidate:
    """Highest-scoring mask for a box prompt; dimensions always match the image."""
    client = client if client is not None else make_segmenter_client(cfg)
    candidate = _with_retries(cfg, "segment_from_box", lambda: client.segment_box(image, box))
    if candidate.mask.shape != image.shape[:2]:
        raise BackendError(
            f"segmenter mask shape {candidate.mask.shape} != image {image.shape[:2]}"
        )
    return candidate


def segment_from_grid(
    cfg: BackendConfig,
    image: np.ndarray,
    points: list[tuple[int, int]],
    client: SegmenterClient | None = None,
) -> list[SegmenterCandidate]:
    """One candidate per point, deduplicated by exact mask equality."""
    if not points:
        raise ValueError("empty point list")
    h, w = image.shape[:2]
    for y, x in points:
        if not (0 <= y < h and 0 <= x < w):
            raise ValueError(f"point ({y}, {x}) outside {h}x{w} image")
    client = client if client is not None else make_segmenter_client(cfg)
    candidates = _with_retries(cfg, "segment_from_grid", lambda: client.segment_points(image, points))
    unique: list[SegmenterCandidate] = []
    seen: set[str] = set()
    for cand in candidates:
        if cand.mask.shape != (h, w):
            raise BackendError(f"segmenter mask shape {cand.mask.shape} != image {(h, w)}")
        key = image_key(as_mask(cand.mask))
        if key not in seen:
            seen.add(key)
            unique.append(cand)
    return unique


def dense_point_grid(box: BoundingBox, height: int, width: int, side: int = 16, dilate: float = 0.10) -> list[tuple[int, int]]:
    """Uniform side x side grid over the box dilated by `dilate`, clipped to bounds."""
    bw, bh = box.x_max - box.x_min, box.y_max - box.y_min
    x0 = max(0, int(np.floor(box.x_min - dilate * bw)))
    x1 = min(width - 1, int(np.ceil(box.x_max - 1 + dilate * bw)))
    y0 = max(0, int(np.floor(box.y_min - dilate * bh)))
    y1 = min(height - 1, int(np.ceil(box.y_max - 1 + dilate * bh)))
    ys = np.linspace(y0, y1, side)
    xs = np.linspace(x0, x1, side)
    points = []
    seen = set()
    for y in ys:
        for x in xs:
            pt = (int(round(y)), int(round(x)))
            if pt not in seen:
                seen.add(pt)
                points.append(pt)
    return points


# ---------------------------------------------------------------------------
# Mock backends (deterministic, offline)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VlmRule:
    """Scripted response: the first rule wins whose substrings all appear in
    the request text and whose image_key prefix, if any, matches an attached
    image."""

    contains: str | tuple[str, ...]
    text: str
    image_key: str | None = None

    @property
    def needles(self) -> tuple[str, ...]:
        return (self.contains,) if isinstance(self.contains, str) else tuple(self.contains)

    def matches(self, req: VlmRequest) -> bool:
        blob = req.system_text + "\n" + req.user_text
        if not all(needle in blob for needle in self.needles):
            return False
        if self.image_key is None:
            return True
        return any(image_key(img).startswith(self.image_key) for img in req.images)


class MockVlm:
    """Deterministic VLM stand-in.

    Resolution order per request: exact script entry (by fingerprint) ->
    fixture file `<dir>/vlm/<sha256>.json` -> first matching rule -> seeded
    synthesis (pure in request content and seed) -> error.
    """

    def __init__(
        self,
        fixtures_dir: str | Path | None = None,
        script: dict[str, str] | None = None,
        rules: list[VlmRule] | None = None,
        seed: int | None = None,
    ):
        self.fixtures_dir = Path(fixtures_dir) if fixtures_dir else None
        self.script = dict(script or {})
        self.rules = list(rules or [])
        self.seed = seed
        self.calls = 0
        if self.fixtures_dir and not self.rules:
            rules_path = self.fixtures_dir / "vlm" / "rules.json"
            if rules_path.is_file():
                self.rules = [
                    VlmRule(
                        contains=tuple(r["contains"]) if isinstance(r["contains"], list) else r["contains"],
                        text=r["text"],
                        image_key=r.get("image_key"),
                    )
                    for r in json.loads(rules_path.read_text())
                ]

    def complete(self, req: VlmRequest) -> str:
        self.calls += 1
        fp = request_fingerprint(req)
        if fp in self.script:
            return self.script[fp]
        if self.fixtures_dir:
            fixture = self.fixtures_dir / "vlm" / f"{fp}.json"
            if fixture.is_file():
                return json.loads(fixture.read_text())["text"]
        for rule in self.rules:
            if rule.matches(req):
                return rule.text
        if self.seed is not None:
            return self._synthesize(fp, req.response_schema)
        raise BackendError(f"no VLM fixture for request {fp}")

    def _synthesize(self, fingerprint: str, schema: ResponseSchema) -> str:
        digest = hashlib.sha256(f"{fingerprint}:{self.seed}".encode()).hexdigest()
        if schema is ResponseSchema.ACCEPT_REJECT:
            return "accept" if int(digest[0], 16) % 2 == 0 else "reject"
        if schema is ResponseSchema.JSON_OBJECT:
            return json.dumps({"mock": digest[:12]})
        return f"mock-response-{digest[:12]}"


class MockDetector:
    """Detector mock backed by a `(image, text) -> box` table.

    Keys are `"<image_key_prefix>|<text>"`; a `"*|<text>"` entry matches any
    image. Misses raise NoDetectionError.
    """

    def __init__(self, table: dict[str, list[int]] | None = None, fixtures_dir: str | Path | None = None):
        self.table = dict(table or {})
        if fixtures_dir:
            path = Path(fixtures_dir) / "detector" / "table.json"
            if path.is_file():
                self.table.update(json.loads(path.read_text()))
        self.calls = 0

    def detect(self, image: np.ndarray, text: str) -> BoundingBox:
        self.calls += 1
        key = image_key(image)
        for table_key, coords in self.table.items():
            prefix, _, entry_text = table_key.partition("|")
            if entry_text != text:
                continue
            if prefix == "*" or key.startswith(prefix):
                return BoundingBox(*coords)
        raise NoDetectionError(f"no detection for {text!r}")


def _flood_component(image: np.ndarray, seed_yx: tuple[int, int], tolerance: int) -> np.ndarray:
    """Connected region of pixels whose color is within `tolerance` of the
    seed pixel (4-connectivity, L1 color distance)."""
    h, w = image.shape[:2]
    color = image[seed_yx].astype(np.int64)
    similar = np.abs(image.astype(np.int64) - color).sum(axis=-1) <= tolerance
    component = np.zeros((h, w), dtype=bool)
    if not similar[seed_yx]:
        return component.astype(np.uint8)
    queue = deque([seed_yx])
    component[seed_yx] = True
    while queue:
        y, x = queue.popleft()
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and similar[ny, nx] and not component[ny, nx]:
                component[ny, nx] = True
                queue.append((ny, nx))
    return component.astype(np.uint8)


class SyntheticSegmenter:
    """Segmenter mock driven by the image itself.

    box mode "box_fill" returns the box rectangle; "flood" grows a
    similar-color component from the box center. Point queries always flood
    from each point, which on flat-colored fixtures yields exactly one
    candidate per touched component.
    """

    def __init__(self, box_mode: str = "box_fill", tolerance: int = 12):
        if box_mode not in ("box_fill", "flood"):
            raise ValueError(f"unknown box_mode {box_mode!r}")
        self.box_mode = box_mode
        self.tolerance = tolerance
        self.calls = 0

    def segment_box(self, image: np.ndarray, box: BoundingBox) -> SegmenterCandidate:
        self.calls += 1
        h, w = image.shape[:2]
        if self.box_mode == "box_fill":
            mask = np.zeros((h, w), dtype=np.uint8)
            mask[box.y_min : box.y_max, box.x_min : box.x_max] = 1
            return SegmenterCandidate(mask=mask, score=1.0)
        center = ((box.y_min + box.y_max) // 2, (box.x_min + box.x_max) // 2)
        return SegmenterCandidate(mask=_flood_component(image, center, self.tolerance), score=1.0)

    def segment_points(self, image: np.ndarray, points: list[tuple[int, int]]) -> list[SegmenterCandidate]:
        self.calls += 1
        out = []
        computed: list[np.ndarray] = []  # points inside a known component reuse its mask
        for y, x in points:
            mask = next((m for m in computed if m[y, x]), None)
            if mask is None:
                mask = _flood_component(image, (y, x), self.tolerance)
                computed.append(mask)
            if mask.any():
                out.append(SegmenterCandidate(mask=mask, score=0.9))
        return out


class TableSegmenter:
    """Fixture-table segmenter: box keys `"<image_key_prefix>|x0,y0,x1,y1"`
    map to stored RLE masks."""

    def __init__(self, table: dict[str, dict], fixtures_dir: str | Path | None = None):
        self.table = dict(table or {})
        if fixtures_dir:
            path = Path(fixtures_dir) / "segmenter" / "table.json"
            if path.is_file():
                self.table.update(json.loads(path.read_text()))
        self.calls = 0

    def _lookup(self, image: np.ndarray, suffix: str) -> dict | None:
        key = image_key(image)
        for table_key, value in self.table.items():
            prefix, _, rest = table_key.partition("|")
            if rest == suffix and (prefix == "*" or key.startswith(prefix)):
                return value
        return None

    def segment_box(self, image: np.ndarray, box: BoundingBox) -> SegmenterCandidate:
        self.calls += 1
        suffix = f"{box.x_min},{box.y_min},{box.x_max},{box.y_max}"
        entry = self._lookup(image, suffix)
        if entry is None:
            raise BackendError(f"no segmenter fixture for box {suffix}")
        return SegmenterCandidate(mask=rle_decode(MaskRLE.from_json(entry["mask_rle"])), score=float(entry.get("score", 1.0)))

    def segment_points(self, image: np.ndarray, points: list[tuple[int, int]]) -> list[SegmenterCandidate]:
        self.calls += 1
        out = []
        for y, x in points:
            entry = self._lookup(image, f"pt:{y},{x}")
            if entry is not None:
                out.append(SegmenterCandidate(mask=rle_decode(MaskRLE.from_json(entry["mask_rle"])), score=float(entry.get("score", 1.0))))
        return out


# ---------------------------------------------------------------------------
# Live HTTP clients (chat-completions style wire protocol)
# ---------------------------------------------------------------------------


def _image_to_data_url(image: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _api_key(cfg: BackendConfig) -> str:
    if not cfg.api_key_env:
        return ""
    value = os.environ.get(cfg.api_key_env, "")
    if not value:
        raise BackendError(f"API key environment variable {cfg.api_key_env} is not set")
    return value


def build_chat_payload(cfg: BackendConfig, req: VlmRequest) -> dict:
    content: list[dict] = []
    if req.user_text:
        content.append({"type": "text", "text": req.user_text})
    for img in req.images:
        content.append({"type": "image_url", "image_url": {"url": _image_to_data_url(img)}})
    messages = []
    if req.system_text:
        messages.append({"role": "system", "content": req.system_text})
    messages.append({"role": "user", "content": content})
    payload = {"model": cfg.model, "messages": messages}
    if req.response_schema is ResponseSchema.JSON_OBJECT:
        payload["response_format"] = {"type": "json_object"}
    payload.update(cfg.extra_options)
    return payload


class HttpVlm:
    """JSON chat-completions client over HTTP with base64-encoded images."""

    def __init__(self, cfg: BackendConfig):
        if not cfg.endpoint:
            raise BackendError("VLM endpoint not configured")
        self.cfg = cfg

    def complete(self, req: VlmRequest) -> str:
        import requests

        try:
            resp = requests.post(
                self.cfg.endpoint,
                json=build_chat_payload(self.cfg, req),
                headers={"Authorization": f"Bearer {_api_key(self.cfg)}"},
                timeout=self.cfg.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientBackendError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"VLM endpoint returned {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected VLM response shape: {body!r}") from exc


class HttpDetector:
    """Generic JSON detector client: posts the image and query, expects a
    pixel-coordinate `box` in the response. Extra options pass through."""

    def __init__(self, cfg: BackendConfig):
        if not cfg.endpoint:
            raise BackendError("detector endpoint not configured")
        self.cfg = cfg

    def detect(self, image: np.ndarray, text: str) -> BoundingBox:
        import requests

        payload = {"image": _image_to_data_url(image), "query": text, **self.cfg.extra_options}
        try:
            resp = requests.post(
                self.cfg.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {_api_key(self.cfg)}"},
                timeout=self.cfg.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientBackendError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"detector returned {resp.status_code}")
        body = resp.json()
        if not body.get("box"):
            raise NoDetectionError(f"no detection for {text!r}")
        return BoundingBox(*[int(v) for v in body["box"]])


class HttpSegmenter:
    """Generic JSON segmenter client; responses carry an RLE mask and score."""

    def __init__(self, cfg: BackendConfig):
        if not cfg.endpoint:
            raise BackendError("segmenter endpoint not configured")
        self.cfg = cfg

    def _post(self, payload: dict) -> dict:
        import requests

        try:
            resp = requests.post(
                self.cfg.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {_api_key(self.cfg)}"},
                timeout=self.cfg.timeout_ms / 1000.0,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientBackendError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"segmenter returned {resp.status_code}")
        return resp.json()

    def segment_box(self, image: np.ndarray, box: BoundingBox) -> SegmenterCandidate:
        body = self._post({"image": _image_to_data_url(image), "box": box.to_json(), **self.cfg.extra_options})
        return SegmenterCandidate(
            mask=rle_decode(MaskRLE.from_json(body["mask_rle"])), score=float(body.get("score", 1.0))
        )

    def segment_points(self, image: np.ndarray, points: list[tuple[int, int]]) -> list[SegmenterCandidate]:
        body = self._post({"image": _image_to_data_url(image), "points": [list(p) for p in points], **self.cfg.extra_options})
        return [
            SegmenterCandidate(mask=rle_decode(MaskRLE.from_json(c["mask_rle"])), score=float(c.get("score", 1.0)))
            for c in body.get("candidates", [])
        ]


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------


def make_vlm_client(cfg: BackendConfig) -> VlmClient:
    if cfg.fixtures_dir or cfg.seed is not None:
        return MockVlm(fixtures_dir=cfg.fixtures_dir, seed=cfg.seed)
    return HttpVlm(cfg)


def make_detector_client(cfg: BackendConfig) -> DetectorClient:
    if cfg.fixtures_dir:
        return MockDetector(fixtures_dir=cfg.fixtures_dir)
    return HttpDetector(cfg)


def make_segmenter_client(cfg: BackendConfig) -> SegmenterClient:
    if cfg.fixtures_dir:
        mode_path = Path(cfg.fixtures_dir) / "segmenter" / "mode.json"
        if mode_path.is_file():
            mode = json.loads(mode_path.read_text())
            if mode.get("mode") == "table":
                return TableSegmenter({}, fixtures_dir=cfg.fixtures_dir)
            return SyntheticSegmenter(
                box_mode=mode.get("box_mode", "box_fill"), tolerance=int(mode.get("tolerance", 12))
            )
        return SyntheticSegmenter()
    return HttpSegmenter(cfg)


def save_vlm_fixture(fixtures_dir: str | Path, req: VlmRequest, text: str) -> Path:
    """Write a hash-keyed fixture file for a request; returns the path."""
    path = Path(fixtures_dir) / "vlm" / f"{request_fingerprint(req)}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"text": text}, indent=2) + "\n", encoding="utf-8")
    return path
