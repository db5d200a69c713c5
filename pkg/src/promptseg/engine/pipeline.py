"""Pipeline orchestration: runs the five stages per image with content-hash
call caching, per-image resume, and a deterministic audit log.

Every backend call is cached under SHA-256(stage, backend id, canonical
request JSON), and a finished image's samples and audit rows are written to
a per-image result file. Re-running with the same inputs therefore replays
from disk instead of re-querying backends, and the output manifest and
audit log are byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..backends import (
    BackendConfig,
    NoDetectionError,
    SegmenterCandidate,
    VlmRequest,
    canonical_request,
    image_key,
    make_detector_client,
    make_segmenter_client,
    make_vlm_client,
)
from ..core import ConceptFamily, DatasetManifest, ImageRecord, Sample, load_manifest, save_manifest
from ..maskops import BoundingBox, MaskRLE, load_image_rgb, rle_decode, rle_encode
from .stages import (
    AuditTrail,
    EngineBackends,
    GroundedRegion,
    RegionDescription,
    generate_negatives,
    make_positive_sample,
    stage1_describe,
    stage2_ground,
    stage3_refine,
    stage3_verify,
    stage4_generate,
    stage5_align,
    union_of_masks,
)
from .templates import TemplateRegistry

log = logging.getLogger(__name__)

STAGE_ORDER = ("stage1", "stage2", "stage3_verify", "stage3_refine", "stage4", "stage5", "negatives")


class PipelineError(RuntimeError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _safe_name(identifier: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", identifier)


class CallCache:
    """Content-addressed response cache shared by all backend proxies."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def key(self, stage: str, backend_id: str, request: dict) -> str:
        payload = json.dumps(
            {"stage": stage, "backend": backend_id, "request": request},
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def get_or_call(self, stage: str, backend_id: str, request: dict, producer) -> dict:
        digest = self.key(stage, backend_id, request)
        path = self.root / backend_id / f"{digest}.json"
        if path.is_file():
            self.hits += 1
            return json.loads(path.read_text(encoding="utf-8"))
        self.misses += 1
        result = producer()
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, json.dumps(result, sort_keys=True))
        return result


class CachedVlm:
    def __init__(self, client, cache: CallCache):
        self.client = client
        self.cache = cache
        self.stage = ""

    def complete(self, req: VlmRequest) -> str:
        result = self.cache.get_or_call(
            self.stage, "vlm", canonical_request(req), lambda: {"text": self.client.complete(req)}
        )
        return result["text"]


class CachedDetector:
    """Caches boxes; a no-detection outcome is itself a cached result."""

    def __init__(self, client, cache: CallCache):
        self.client = client
        self.cache = cache
        self.stage = ""

    def detect(self, image: np.ndarray, text: str) -> BoundingBox:
        def produce():
            try:
                box = self.client.detect(image, text)
            except NoDetectionError:
                return {"no_detection": True}
            return {"box": [box.x_min, box.y_min, box.x_max, box.y_max]}

        result = self.cache.get_or_call(self.stage, "detector", {"image": image_key(image), "text": text}, produce)
        if result.get("no_detection"):
            raise NoDetectionError(f"no detection for {text!r}")
        return BoundingBox(*result["box"])


class CachedSegmenter:
    def __init__(self, client, cache: CallCache):
        self.client = client
        self.cache = cache
        self.stage = ""

    @staticmethod
    def _pack(candidate: SegmenterCandidate) -> dict:
        return {"mask_rle": rle_encode(candidate.mask).to_json(), "score": candidate.score}

    @staticmethod
    def _unpack(entry: dict) -> SegmenterCandidate:
        return SegmenterCandidate(mask=rle_decode(MaskRLE.from_json(entry["mask_rle"])), score=float(entry["score"]))

    def segment_box(self, image: np.ndarray, box: BoundingBox) -> SegmenterCandidate:
        request = {"image": image_key(image), "box": [box.x_min, box.y_min, box.x_max, box.y_max]}
        result = self.cache.get_or_call(
            self.stage, "segmenter", request, lambda: self._pack(self.client.segment_box(image, box))
        )
        return self._unpack(result)

    def segment_points(self, image: np.ndarray, points: list[tuple[int, int]]) -> list[SegmenterCandidate]:
        request = {"image": image_key(image), "points": [list(p) for p in points]}
        result = self.cache.get_or_call(
            self.stage,
            "segmenter",
            request,
            lambda: {"candidates": [self._pack(c) for c in self.client.segment_points(image, points)]},
        )
        return [self._unpack(e) for e in result["candidates"]]


@dataclass
class EngineRunState:
    """Per-image stage completion markers; a marker may only be appended when
    every predecessor stage is already marked."""

    run_id: str
    cache_dir: Path

    def _state_path(self, image_id: str) -> Path:
        return self.cache_dir / "state" / f"{_safe_name(image_id)}.json"

    def stages_done(self, image_id: str) -> list[str]:
        path = self._state_path(image_id)
        if not path.is_file():
            return []
        return json.loads(path.read_text(encoding="utf-8"))["stages"]

    def mark_stage(self, image_id: str, stage: str) -> None:
        done = self.stages_done(image_id)
        if stage in done:
            return
        expected = STAGE_ORDER[len(done)]
        if stage != expected:
            raise PipelineError(f"stage {stage} marked before {expected} for image {image_id}")
        done.append(stage)
        path = self._state_path(image_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, json.dumps({"run_id": self.run_id, "stages": done}))

    def result_path(self, image_id: str) -> Path:
        return self.cache_dir / "images" / f"{_safe_name(image_id)}.json"

    def image_done(self, image_id: str) -> bool:
        return self.result_path(image_id).is_file()


@dataclass
class EngineConfig:
    out_dir: Path
    backend_cfg: BackendConfig = field(default_factory=BackendConfig)
    cache_dir: Path | None = None
    concepts: tuple[ConceptFamily, ...] = tuple(ConceptFamily)
    split: str = "train"
    provenance: str = "engine"
    seed: int = 0
    max_prompts_per_concept: int = 3
    templates_dir: Path | None = None
    seed_mask_manifest: Path | None = None
    refine_seeded: bool = False
    run_id: str = "run"

    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.out_dir) / "cache"


def _load_seed_regions(path: Path) -> dict[str, list[tuple[str, MaskRLE]]]:
    manifest = load_manifest(path)
    seeds: dict[str, list[tuple[str, MaskRLE]]] = {}
    for sample in manifest.samples:
        seeds.setdefault(sample.image.image_id, []).append((sample.prompt, sample.mask))
    return seeds


def _mask_bbox(mask: np.ndarray) -> BoundingBox | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _process_image(
    image: ImageRecord,
    pixels: np.ndarray,
    cfg: EngineConfig,
    backends: EngineBackends,
    templates: TemplateRegistry,
    state: EngineRunState,
    seed_regions: list[tuple[str, MaskRLE]] | None,
) -> tuple[list[Sample], list[dict]]:
    audit = AuditTrail()
    image_id = image.image_id

    if seed_regions is None:
        descriptions = stage1_describe(image, pixels, backends, templates, audit)
        state.mark_stage(image_id, "stage1")
        if not descriptions:
            return [], audit.rows
        regions = []
        for desc in descriptions:
            region = stage2_ground(image, pixels, desc, backends, audit)
            if region is not None:
                regions.append(region)
        state.mark_stage(image_id, "stage2")
    else:
        # Benchmark-curation mode: masks are seeded, so detection and
        # box-prompted segmentation are skipped.
        regions = []
        for i, (text, rle) in enumerate(seed_regions, start=1):
            mask = rle_decode(rle)
            box = _mask_bbox(mask)
            if box is None:
                audit.add(image_id, "stage2", text, "drop", "empty_seed_mask")
                continue
            desc = RegionDescription(index=i, text=text, image_id=image_id)
            regions.append(GroundedRegion(description=desc, box=box, initial_mask=mask))
        state.mark_stage(image_id, "stage1")
        state.mark_stage(image_id, "stage2")

    verified = [stage3_verify(image, pixels, r, backends, templates, audit) for r in regions]
    accepted = [r for r in verified if r.accepted]
    state.mark_stage(image_id, "stage3_verify")

    refine = seed_regions is None or cfg.refine_seeded
    for region in accepted:
        if refine:
            stage3_refine(image, pixels, region, backends, templates, audit)
        else:
            region.final_mask = region.initial_mask
    state.mark_stage(image_id, "stage3_refine")

    samples: list[Sample] = []
    per_concept_prompts: dict[ConceptFamily, list] = {}
    for concept in cfg.concepts:
        if accepted:
            per_concept_prompts[concept] = stage4_generate(
                image, pixels, accepted, concept, backends, templates, audit,
                max_prompts=cfg.max_prompts_per_concept,
            )
        else:
            per_concept_prompts[concept] = []
    state.mark_stage(image_id, "stage4")

    positives_per_concept: dict[ConceptFamily, int] = {}
    for concept in cfg.concepts:
        count = 0
        for prompt in per_concept_prompts[concept]:
            union = union_of_masks(accepted, prompt.region_indices)
            stage5_align(image, pixels, prompt, union, backends, templates, audit)
            if prompt.aligned == "accept":
                count += 1
                sample = make_positive_sample(image, prompt, union, count, cfg.split, cfg.provenance)
                samples.append(sample)
                audit.add(image_id, "stage5", prompt.prompt, "keep", "emitted")
        positives_per_concept[concept] = count
    state.mark_stage(image_id, "stage5")

    for concept in cfg.concepts:
        samples.extend(
            generate_negatives(
                image, pixels, accepted, concept, positives_per_concept[concept],
                backends, templates, audit,
                split=cfg.split, provenance=cfg.provenance,
                max_prompts=cfg.max_prompts_per_concept,
            )
        )
    state.mark_stage(image_id, "negatives")
    return samples, audit.rows


@dataclass
class PipelineResult:
    manifest: DatasetManifest
    manifest_path: Path
    audit_path: Path
    cache_hits: int
    cache_misses: int


def run_pipeline(
    images: list[ImageRecord],
    cfg: EngineConfig,
    vlm=None,
    detector=None,
    segmenter=None,
) -> PipelineResult:
    """Run every stage over `images` in order and write manifest + audit.

    Individual image failures are isolated into audit rows; only
    configuration problems abort the run.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = cfg.resolved_cache_dir()
    cache_dir.mkdir(parents=True, exist_ok=True)

    templates = (
        TemplateRegistry.from_dir(cfg.templates_dir) if cfg.templates_dir else TemplateRegistry.defaults()
    )
    cache = CallCache(cache_dir / "calls")
    backends = EngineBackends(
        cfg=cfg.backend_cfg,
        vlm=CachedVlm(vlm if vlm is not None else make_vlm_client(cfg.backend_cfg), cache),
        detector=CachedDetector(detector if detector is not None else make_detector_client(cfg.backend_cfg), cache),
        segmenter=CachedSegmenter(
            segmenter if segmenter is not None else make_segmenter_client(cfg.backend_cfg), cache
        ),
    )
    state = EngineRunState(run_id=cfg.run_id, cache_dir=cache_dir)
    seed_regions = _load_seed_regions(cfg.seed_mask_manifest) if cfg.seed_mask_manifest else None

    all_samples: list[Sample] = []
    all_audit: list[dict] = []
    for image in images:
        result_path = state.result_path(image.image_id)
        if state.image_done(image.image_id):
            stored = json.loads(result_path.read_text(encoding="utf-8"))
            all_samples.extend(Sample.from_json(s) for s in stored["samples"])
            all_audit.extend(stored["audit"])
            continue
        try:
            pixels = load_image_rgb(image.uri)
            if pixels.shape[:2] != (image.height, image.width):
                raise PipelineError(
                    f"image {image.image_id}: file is {pixels.shape[1]}x{pixels.shape[0]}, "
                    f"record says {image.width}x{image.height}"
                )
            samples, audit_rows = _process_image(
                image, pixels, cfg, backends, templates, state,
                seed_regions.get(image.image_id, []) if seed_regions is not None else None,
            )
        except Exception as exc:  # isolate per-image failures
            log.exception("image %s failed", image.image_id)
            audit_rows = [
                {
                    "image_id": image.image_id,
                    "stage": "pipeline",
                    "item": "-",
                    "action": "error",
                    "reason": f"image_failed:{type(exc).__name__}",
                }
            ]
            samples = []
        result_path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(
            result_path,
            json.dumps({"samples": [s.to_json() for s in samples], "audit": audit_rows}, sort_keys=True),
        )
        all_samples.extend(samples)
        all_audit.extend(audit_rows)

    manifest = DatasetManifest(
        samples=all_samples,
        metadata={"run_id": cfg.run_id, "seed": str(cfg.seed), "split": cfg.split},
    )
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    audit_path = out_dir / "audit.jsonl"
    audit_text = "".join(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n" for row in all_audit)
    _atomic_write(audit_path, audit_text)
    return PipelineResult(
        manifest=manifest,
        manifest_path=manifest_path,
        audit_path=audit_path,
        cache_hits=cache.hits,
        cache_misses=cache.misses,
    )
