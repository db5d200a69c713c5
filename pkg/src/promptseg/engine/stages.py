"""The five engine stages plus negative-prompt generation.

Each stage consumes the previous stage's survivors and records an audit row
for everything it drops, so the output manifest can always be traced back
to the gate decisions that produced it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from ..backends import (
    BackendConfig,
    BackendError,
    NoDetectionError,
    ResponseSchema,
    SchemaParseError,
    VlmRequest,
    dense_point_grid,
    detect_region,
    segment_from_box,
    segment_from_grid,
    vlm_complete,
)
from ..core import ConceptFamily, ImageRecord, Sample
from ..maskops import BoundingBox, MaskRLE, binary_iou, render_marks_overlay, rle_encode
from .templates import TemplateKind, TemplateRegistry

MAX_DESCRIPTION_WORDS = 15
MIN_DESCRIPTIONS = 5
MAX_DESCRIPTIONS = 7
MAX_PROMPTS_PER_CONCEPT = 3


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionDescription:
    index: int
    text: str
    image_id: str

    def __post_init__(self):
        words = len(self.text.split())
        if not (1 <= words <= MAX_DESCRIPTION_WORDS):
            raise StageError(f"description must be 1..{MAX_DESCRIPTION_WORDS} words, got {words}")


@dataclass
class GroundedRegion:
    description: RegionDescription
    box: BoundingBox
    initial_mask: np.ndarray
    refined_mask: np.ndarray | None = None
    final_mask: np.ndarray | None = None
    verdicts: dict[str, str] = field(default_factory=dict)

    @property
    def index(self) -> int:
        return self.description.index

    @property
    def accepted(self) -> bool:
        return self.verdicts.get("consistency") == "accept"


@dataclass
class CandidatePrompt:
    prompt: str
    concept: ConceptFamily
    region_indices: list[int]
    aligned: str | None = None

    def __post_init__(self):
        if not self.prompt:
            raise StageError("empty candidate prompt")
        if not self.region_indices:
            raise StageError("candidate prompt references no regions")


class AuditTrail:
    """Append-only record of gate decisions; rows are plain dicts."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, image_id: str, stage: str, item: str, action: str, reason: str) -> None:
        self.rows.append(
            {"image_id": image_id, "stage": stage, "item": item, "action": action, "reason": reason}
        )


@dataclass
class EngineBackends:
    """One bundle for the three service clients plus the shared call policy."""

    cfg: BackendConfig
    vlm: object
    detector: object
    segmenter: object

    def enter_stage(self, name: str) -> None:
        for client in (self.vlm, self.detector, self.segmenter):
            if hasattr(client, "stage"):
                client.stage = name


def stage1_describe(
    image: ImageRecord,
    pixels: np.ndarray,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
) -> list[RegionDescription]:
    """Ask the VLM for 5-7 region descriptions; over-long ones are dropped,
    surplus valid ones truncated to 7, and a thin yield is flagged but kept."""
    backends.enter_stage("stage1")
    template = templates.get(TemplateKind.SCENE)
    req = VlmRequest(
        system_text=template.render(
            min_regions=MIN_DESCRIPTIONS, max_regions=MAX_DESCRIPTIONS, max_words=MAX_DESCRIPTION_WORDS
        ),
        user_text="List the region descriptions.",
        images=(pixels,),
        response_schema=ResponseSchema.JSON_OBJECT,
    )
    try:
        response = vlm_complete(backends.cfg, req, client=backends.vlm)
    except SchemaParseError:
        audit.add(image.image_id, "stage1", "-", "skip", "unparseable_response")
        return []
    entries = response.parsed if isinstance(response.parsed, list) else None
    if entries is None:
        audit.add(image.image_id, "stage1", "-", "skip", "response_not_a_list")
        return []

    valid: list[str] = []
    for entry in entries:
        if not isinstance(entry, str) or not entry.strip():
            audit.add(image.image_id, "stage1", repr(entry)[:80], "drop", "invalid_entry")
            continue
        text = " ".join(entry.split())
        if len(text.split()) > MAX_DESCRIPTION_WORDS:
            audit.add(image.image_id, "stage1", text, "drop", "word_limit")
            continue
        valid.append(text)

    if len(valid) > MAX_DESCRIPTIONS:
        for text in valid[MAX_DESCRIPTIONS:]:
            audit.add(image.image_id, "stage1", text, "drop", "over_limit")
        valid = valid[:MAX_DESCRIPTIONS]
    if not valid:
        audit.add(image.image_id, "stage1", "-", "skip", "no_valid_descriptions")
        return []
    if len(valid) < MIN_DESCRIPTIONS:
        audit.add(image.image_id, "stage1", "-", "warn", "low_yield")
    return [RegionDescription(index=i + 1, text=text, image_id=image.image_id) for i, text in enumerate(valid)]


def stage2_ground(
    image: ImageRecord,
    pixels: np.ndarray,
    desc: RegionDescription,
    backends: EngineBackends,
    audit: AuditTrail,
) -> GroundedRegion | None:
    """Detector box -> box-prompted segmentation. A no-detection drops the
    description; it is never fatal."""
    backends.enter_stage("stage2")
    try:
        box = detect_region(backends.cfg, pixels, desc.text, client=backends.detector)
    except NoDetectionError:
        audit.add(image.image_id, "stage2", desc.text, "drop", "no_detection")
        return None
    candidate = segment_from_box(backends.cfg, pixels, box, client=backends.segmenter)
    return GroundedRegion(description=desc, box=box, initial_mask=candidate.mask)


def stage3_verify(
    image: ImageRecord,
    pixels: np.ndarray,
    region: GroundedRegion,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
) -> GroundedRegion:
    """Mask-text consistency gate; anything unparseable or broken rejects."""
    backends.enter_stage("stage3_verify")
    template = templates.get(TemplateKind.MASK_VERIFY)
    overlay = render_marks_overlay(pixels, [(region.index, region.initial_mask)])
    req = VlmRequest(
        system_text=template.render(description=region.description.text),
        user_text="Verify the outlined region.",
        images=(pixels, overlay),
        response_schema=ResponseSchema.ACCEPT_REJECT,
    )
    try:
        verdict = vlm_complete(backends.cfg, req, client=backends.vlm).parsed
        reason = "verdict"
    except SchemaParseError:
        verdict, reason = "reject", "unparseable_verdict"
    except BackendError:
        verdict, reason = "reject", "backend"
    region.verdicts["consistency"] = verdict
    if verdict == "reject":
        audit.add(image.image_id, "stage3_verify", region.description.text, "drop", reason)
    return region


def stage3_refine(
    image: ImageRecord,
    pixels: np.ndarray,
    region: GroundedRegion,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
) -> GroundedRegion:
    """Grid-sample alternative masks, keep the closest to the initial one,
    then let the VLM pick the final winner. Every failure path falls back to
    the initial mask."""
    if not region.accepted:
        raise StageError("stage3_refine requires a consistency-accepted region")
    backends.enter_stage("stage3_refine")
    h, w = pixels.shape[:2]
    points = dense_point_grid(region.box, height=h, width=w)
    try:
        candidates = segment_from_grid(backends.cfg, pixels, points, client=backends.segmenter)
    except BackendError:
        audit.add(image.image_id, "stage3_refine", region.description.text, "warn", "backend_fallback")
        region.final_mask = region.initial_mask
        return region
    if not candidates:
        audit.add(image.image_id, "stage3_refine", region.description.text, "warn", "no_candidates")
        region.final_mask = region.initial_mask
        return region

    scores = [binary_iou(c.mask, region.initial_mask) for c in candidates]
    best = int(np.argmax(scores))  # ties resolve to the first candidate
    region.refined_mask = candidates[best].mask
    if np.array_equal(region.refined_mask, region.initial_mask):
        region.final_mask = region.initial_mask
        return region

    template = templates.get(TemplateKind.MASK_COMPARE)
    overlay_initial = render_marks_overlay(pixels, [(region.index, region.initial_mask)])
    overlay_refined = render_marks_overlay(pixels, [(region.index, region.refined_mask)])
    req = VlmRequest(
        system_text=template.render(description=region.description.text),
        user_text="Choose the better candidate.",
        images=(overlay_initial, overlay_refined),
        response_schema=ResponseSchema.FREE_TEXT,
    )
    try:
        answer = vlm_complete(backends.cfg, req, client=backends.vlm).text.strip().lower()
        choice = answer.split()[0].strip(".,:;!") if answer else ""
        if choice not in ("original", "refined"):
            audit.add(image.image_id, "stage3_refine", region.description.text, "warn", "unparseable_choice")
            choice = "original"
    except BackendError:
        audit.add(image.image_id, "stage3_refine", region.description.text, "warn", "backend_fallback")
        choice = "original"
    region.final_mask = region.initial_mask if choice == "original" else region.refined_mask
    return region


_TRIVIAL_PATTERN = re.compile(r"^(?:please\s+)?segment\s+(?:the\s+|a\s+|an\s+)?([a-z][a-z0-9'\-]*)$")


def _tokenize(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9'\-]+", text.lower()))


def is_trivial_prompt(prompt: str, regions: list[GroundedRegion]) -> bool:
    """True when the prompt is a bare "segment the <category>" and exactly
    one accepted region's description mentions that category token."""
    normalized = " ".join(prompt.lower().split()).rstrip(".!?")
    match = _TRIVIAL_PATTERN.match(normalized)
    if not match:
        return False
    category = match.group(1)
    mentions = sum(1 for r in regions if category in _tokenize(r.description.text))
    return mentions == 1


def stage4_generate(
    image: ImageRecord,
    pixels: np.ndarray,
    regions: list[GroundedRegion],
    concept: ConceptFamily,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
    max_prompts: int = MAX_PROMPTS_PER_CONCEPT,
) -> list[CandidatePrompt]:
    """Concept-driven prompt generation over the numbered overlay; dangling
    region references and trivial lone-object prompts are pruned."""
    if not regions:
        raise StageError("stage4 requires at least one accepted region")
    backends.enter_stage("stage4")
    accepted_indices = {r.index for r in regions}
    overlay = render_marks_overlay(pixels, [(r.index, r.final_mask) for r in regions])
    listing = "\n".join(f"{r.index}. {r.description.text}" for r in regions)
    template = templates.get(TemplateKind.POSITIVE, concept)
    req = VlmRequest(
        system_text=template.render(regions=listing, max_prompts=max_prompts),
        user_text="Write the requests.",
        images=(overlay,),
        response_schema=ResponseSchema.JSON_OBJECT,
    )
    try:
        response = vlm_complete(backends.cfg, req, client=backends.vlm)
    except (SchemaParseError, BackendError) as exc:
        audit.add(image.image_id, "stage4", concept.value, "skip", f"vlm_failure:{type(exc).__name__}")
        return []
    entries = response.parsed if isinstance(response.parsed, list) else []
    if not isinstance(response.parsed, list):
        audit.add(image.image_id, "stage4", concept.value, "skip", "response_not_a_list")

    shaped: list[tuple[str, list[int]]] = []
    for entry in entries:
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("prompt"), str)
            or not entry["prompt"].strip()
            or not isinstance(entry.get("regions"), list)
            or not entry["regions"]
            or not all(isinstance(i, int) for i in entry["regions"])
        ):
            audit.add(image.image_id, "stage4", repr(entry)[:80], "drop", "invalid_entry")
            continue
        if len(shaped) >= max_prompts:
            audit.add(image.image_id, "stage4", entry["prompt"], "drop", "over_limit")
            continue
        shaped.append((" ".join(entry["prompt"].split()), [int(i) for i in entry["regions"]]))

    kept: list[CandidatePrompt] = []
    for prompt_text, indices in shaped:
        if not set(indices) <= accepted_indices:
            audit.add(image.image_id, "stage4", prompt_text, "drop", "dangling_region")
            continue
        if is_trivial_prompt(prompt_text, regions):
            audit.add(image.image_id, "stage4", prompt_text, "drop", "trivial_prompt")
            continue
        kept.append(CandidatePrompt(prompt=prompt_text, concept=concept, region_indices=sorted(set(indices))))
    return kept


def stage5_align(
    image: ImageRecord,
    pixels: np.ndarray,
    prompt: CandidatePrompt,
    union_mask: np.ndarray,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
) -> CandidatePrompt:
    """Final prompt-mask alignment gate over the union of region masks."""
    backends.enter_stage("stage5")
    template = templates.get(TemplateKind.ALIGN_VERIFY)
    overlay = render_marks_overlay(pixels, [(1, union_mask)])
    req = VlmRequest(
        system_text=template.render(prompt=prompt.prompt),
        user_text="Verify the selection.",
        images=(pixels, overlay),
        response_schema=ResponseSchema.ACCEPT_REJECT,
    )
    try:
        prompt.aligned = vlm_complete(backends.cfg, req, client=backends.vlm).parsed
        reason = "alignment"
    except SchemaParseError:
        prompt.aligned, reason = "reject", "unparseable_verdict"
    except BackendError:
        prompt.aligned, reason = "reject", "backend"
    if prompt.aligned == "reject":
        audit.add(image.image_id, "stage5", prompt.prompt, "drop", reason)
    return prompt


def generate_negatives(
    image: ImageRecord,
    pixels: np.ndarray,
    regions: list[GroundedRegion],
    concept: ConceptFamily,
    n_positives: int,
    backends: EngineBackends,
    templates: TemplateRegistry,
    audit: AuditTrail,
    split: str = "train",
    provenance: str = "engine",
    max_prompts: int = MAX_PROMPTS_PER_CONCEPT,
) -> list[Sample]:
    """Adversarial empty-mask prompts, each confirmed absent by the verifier
    and emitted at most one-per-positive for this (image, concept)."""
    if n_positives <= 0:
        return []
    backends.enter_stage("negatives")
    listing = "\n".join(f"{r.index}. {r.description.text}" for r in regions)
    gen_template = templates.get(TemplateKind.NEGATIVE_GENERATION, concept)
    req = VlmRequest(
        system_text=gen_template.render(regions=listing, max_prompts=max_prompts),
        user_text="Write the adversarial requests.",
        images=(pixels,),
        response_schema=ResponseSchema.JSON_OBJECT,
    )
    try:
        response = vlm_complete(backends.cfg, req, client=backends.vlm)
    except (SchemaParseError, BackendError) as exc:
        audit.add(image.image_id, "negatives", concept.value, "skip", f"vlm_failure:{type(exc).__name__}")
        return []
    candidates = response.parsed if isinstance(response.parsed, list) else []

    verify_template = templates.get(TemplateKind.NEGATIVE_VERIFICATION, concept)
    h, w = pixels.shape[:2]
    samples: list[Sample] = []
    for entry in candidates:
        if not isinstance(entry, str) or not entry.strip():
            audit.add(image.image_id, "negatives", repr(entry)[:80], "drop", "invalid_entry")
            continue
        text = " ".join(entry.split())
        if len(samples) >= n_positives:
            audit.add(image.image_id, "negatives", text, "drop", "pairing_quota")
            continue
        verify_req = VlmRequest(
            system_text=verify_template.render(prompt=text),
            user_text="Verify absence.",
            images=(pixels,),
            response_schema=ResponseSchema.ACCEPT_REJECT,
        )
        try:
            verdict = vlm_complete(backends.cfg, verify_req, client=backends.vlm).parsed
        except SchemaParseError:
            audit.add(image.image_id, "negatives", text, "drop", "unparseable_verdict")
            continue
        except BackendError:
            audit.add(image.image_id, "negatives", text, "drop", "backend")
            continue
        if verdict != "accept":
            audit.add(image.image_id, "negatives", text, "drop", "verifier_reject")
            continue
        samples.append(
            Sample(
                sample_id=f"{image.image_id}/{concept.value}/n{len(samples) + 1}",
                image=image,
                prompt=text,
                mask=MaskRLE.empty(h, w),
                concept=concept,
                split=split,
                provenance=provenance,
                is_negative=True,
            )
        )
        audit.add(image.image_id, "negatives", text, "keep", "emitted")
    return samples


def union_of_masks(regions: list[GroundedRegion], indices: list[int]) -> np.ndarray:
    by_index = {r.index: r for r in regions}
    masks = [by_index[i].final_mask for i in indices]
    out = masks[0].copy()
    for m in masks[1:]:
        out |= m
    return out


def make_positive_sample(
    image: ImageRecord,
    prompt: CandidatePrompt,
    union_mask: np.ndarray,
    ordinal: int,
    split: str,
    provenance: str,
) -> Sample:
    return Sample(
        sample_id=f"{image.image_id}/{prompt.concept.value}/p{ordinal}",
        image=image,
        prompt=prompt.prompt,
        mask=rle_encode(union_mask),
        concept=prompt.concept,
        split=split,
        provenance=provenance,
        is_negative=False,
    )
