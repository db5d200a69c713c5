"""Shared domain types, manifest serialization, and dataset statistics.

Manifests are UTF-8 line-delimited JSON: a header line carrying
schema_version and metadata, then one sample per line. Serialization is
canonical (sorted keys, fixed separators), so save -> load -> save is
byte-stable.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .maskops import MaskRLE, rle_decode

SCHEMA_VERSION = 1


class ManifestError(ValueError):
    """Raised for malformed manifest files or invalid samples."""


class ConceptFamily(str, enum.Enum):
    ENTITIES = "entities"
    SPATIAL_LAYOUT = "spatial_layout"
    RELATIONS_EVENTS = "relations_events"
    AFFORDANCES_FUNCTIONS = "affordances_functions"
    PHYSICS_SAFETY = "physics_safety"

    @property
    def short_label(self) -> str:
        return _SHORT_LABELS[self]


_SHORT_LABELS = {
    ConceptFamily.ENTITIES: "Ent.",
    ConceptFamily.SPATIAL_LAYOUT: "Spat.",
    ConceptFamily.RELATIONS_EVENTS: "Rel.",
    ConceptFamily.AFFORDANCES_FUNCTIONS: "Aff.",
    ConceptFamily.PHYSICS_SAFETY: "Phys.",
}

SPLITS = ("sam_seeded", "human_annotated", "train")
PROVENANCES = ("engine", "coco_instances", "coco_panoptic", "refcoco", "synthetic_test")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    uri: str
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ManifestError(f"image {self.image_id!r} has degenerate size {self.width}x{self.height}")


@dataclass(frozen=True)
class Sample:
    """One benchmark or training record: a prompt grounded to a mask."""

    sample_id: str
    image: ImageRecord
    prompt: str
    mask: MaskRLE
    concept: ConceptFamily
    split: str
    provenance: str
    is_negative: bool = False

    def __post_init__(self):
        if not self.prompt:
            raise ManifestError(f"sample {self.sample_id!r} has empty prompt")
        if self.split not in SPLITS:
            raise ManifestError(f"sample {self.sample_id!r} has unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"sample {self.sample_id!r} has unknown provenance {self.provenance!r}")
        h, w = self.mask.size
        if (h, w) != (self.image.height, self.image.width):
            raise ManifestError(
                f"sample {self.sample_id!r}: mask size {h}x{w} != image {self.image.height}x{self.image.width}"
            )
        if self.is_negative != (self.mask.foreground == 0):
            raise ManifestError(
                f"sample {self.sample_id!r}: is_negative={self.is_negative} but mask has "
                f"{self.mask.foreground} foreground pixels"
            )

    def decode_mask(self):
        return rle_decode(self.mask)

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_id": self.image.image_id,
            "image_uri": self.image.uri,
            "width": self.image.width,
            "height": self.image.height,
            "prompt": self.prompt,
            "mask_rle": self.mask.to_json(),
            "concept": self.concept.value,
            "split": self.split,
            "provenance": self.provenance,
            "is_negative": self.is_negative,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sample":
        required = {
            "sample_id", "image_id", "image_uri", "width", "height",
            "prompt", "mask_rle", "concept", "split", "provenance", "is_negative",
        }
        missing = required - obj.keys()
        if missing:
            raise ManifestError(f"sample record missing keys {sorted(missing)}")
        return cls(
            sample_id=str(obj["sample_id"]),
            image=ImageRecord(
                image_id=str(obj["image_id"]),
                uri=str(obj["image_uri"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
            ),
            prompt=str(obj["prompt"]),
            mask=MaskRLE.from_json(obj["mask_rle"]),
            concept=ConceptFamily(obj["concept"]),
            split=str(obj["split"]),
            provenance=str(obj["provenance"]),
            is_negative=bool(obj["is_negative"]),
        )


@dataclass
class DatasetManifest:
    samples: list[Sample] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        seen: set[str] = set()
        for i, sample in enumerate(self.samples):
            if sample.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {sample.sample_id!r} (sample {i + 1})")
            seen.add(sample.sample_id)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SplitStats:
    total: int
    per_split: dict[str, int]
    per_concept: dict[ConceptFamily, int]
    prompt_word_mean: float
    prompt_word_std: float

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "per_split": dict(self.per_split),
            "per_concept": {c.value: n for c, n in self.per_concept.items()},
            "prompt_word_mean": self.prompt_word_mean,
            "prompt_word_std": self.prompt_word_std,
        }


def _canonical(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest in canonical line-delimited JSON."""
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": manifest.schema_version, "metadata": manifest.metadata}
    lines = [_canonical(header)]
    lines.extend(_canonical(s.to_json()) for s in manifest.samples)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file, preserving sample order.

    Errors name the offending 1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest file (missing header line)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line 1: malformed header: {exc}") from exc
    if not isinstance(header, dict) or "schema_version" not in header:
        raise ManifestError(f"{path}: line 1: header must carry schema_version")
    manifest = DatasetManifest(
        schema_version=int(header["schema_version"]),
        metadata={str(k): str(v) for k, v in header.get("metadata", {}).items()},
    )
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            sample = Sample.from_json(obj)
        except ManifestError as exc:
            raise ManifestError(f"{path}: line {lineno}: {exc}") from exc
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ManifestError(f"{path}: line {lineno}: malformed sample: {exc}") from exc
        if sample.sample_id in seen:
            raise ManifestError(f"{path}: line {lineno}: duplicate sample_id {sample.sample_id!r}")
        seen.add(sample.sample_id)
        manifest.samples.append(sample)
    return manifest


def manifest_stats(manifest: DatasetManifest) -> SplitStats:
    """Counts per split/concept plus whitespace-token word statistics.

    Std is the population standard deviation; an empty manifest reports 0
    for both moments.
    """
    per_split: dict[str, int] = {}
    per_concept: dict[ConceptFamily, int] = {}
    word_counts: list[int] = []
    for sample in manifest.samples:
        per_split[sample.split] = per_split.get(sample.split, 0) + 1
        per_concept[sample.concept] = per_concept.get(sample.concept, 0) + 1
        word_counts.append(len(sample.prompt.split()))
    if word_counts:
        mean = sum(word_counts) / len(word_counts)
        var = sum((n - mean) ** 2 for n in word_counts) / len(word_counts)
        std = math.sqrt(var)
    else:
        mean = std = 0.0
    return SplitStats(
        total=len(manifest.samples),
        per_split=per_split,
        per_concept=per_concept,
        prompt_word_mean=mean,
        prompt_word_std=std,
    )
