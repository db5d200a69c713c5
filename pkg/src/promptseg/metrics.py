"""Benchmark scoring: gIoU, cIoU, and per-concept report tables.

gIoU is the mean of per-sample IoU; cIoU is the ratio of summed
intersections to summed unions. Both are reported as percentages. A pair
with an empty ground truth scores per-sample IoU 1.0 when the prediction is
also empty and 0.0 otherwise, so correctly rejected negative prompts count
as perfect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ConceptFamily
from .maskops import intersection_union

CONCEPT_ORDER = (
    ConceptFamily.ENTITIES,
    ConceptFamily.SPATIAL_LAYOUT,
    ConceptFamily.RELATIONS_EVENTS,
    ConceptFamily.AFFORDANCES_FUNCTIONS,
    ConceptFamily.PHYSICS_SAFETY,
)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    sample_id: str
    concept: ConceptFamily
    gt: np.ndarray
    pred: np.ndarray


@dataclass(frozen=True)
class ConceptReport:
    overall_giou: float
    overall_ciou: float
    per_concept_giou: dict[ConceptFamily, float]
    per_concept_ciou: dict[ConceptFamily, float]
    n: dict[ConceptFamily, int]
    total: int

    def to_json(self) -> dict:
        return {
            "overall": {"giou": self.overall_giou, "ciou": self.overall_ciou, "n": self.total},
            "per_concept": {
                c.value: {
                    "giou": self.per_concept_giou[c],
                    "ciou": self.per_concept_ciou[c],
                    "n": self.n[c],
                }
                for c in CONCEPT_ORDER
                if c in self.n
            },
        }

    def to_text_table(self) -> str:
        """Aligned table with fixed column order: All, Ent., Spat., Rel., Aff., Phys."""
        headers = ["Metric", "All"] + [c.short_label for c in CONCEPT_ORDER]
        rows = [
            ["gIoU", f"{self.overall_giou:.1f}"]
            + [f"{self.per_concept_giou[c]:.1f}" if c in self.n else "-" for c in CONCEPT_ORDER],
            ["cIoU", f"{self.overall_ciou:.1f}"]
            + [f"{self.per_concept_ciou[c]:.1f}" if c in self.n else "-" for c in CONCEPT_ORDER],
            ["n", str(self.total)] + [str(self.n.get(c, 0)) for c in CONCEPT_ORDER],
        ]
        widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
        def fmt(cells):
            return "  ".join(c.rjust(widths[i]) for i, c in enumerate(cells))
        sep = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(headers), sep] + [fmt(r) for r in rows])


def _per_sample_iou(pair: EvalPair) -> float:
    inter, union = intersection_union(pair.gt, pair.pred)
    if union == 0:
        return 1.0
    return inter / union


def giou(pairs: list[EvalPair]) -> float:
    """Mean per-sample IoU x 100."""
    if not pairs:
        raise MetricsError("giou of empty pair list")
    return 100.0 * sum(_per_sample_iou(p) for p in pairs) / len(pairs)


def ciou(pairs: list[EvalPair]) -> float:
    """Summed intersections over summed unions x 100.

    Both-empty pairs contribute nothing to either sum; if every union is
    zero the degenerate all-empty set scores 100.
    """
    if not pairs:
        raise MetricsError("ciou of empty pair list")
    inter_sum = 0
    union_sum = 0
    for pair in pairs:
        inter, union = intersection_union(pair.gt, pair.pred)
        inter_sum += inter
        union_sum += union
    if union_sum == 0:
        return 100.0
    return 100.0 * inter_sum / union_sum


def per_concept_report(pairs: list[EvalPair]) -> ConceptReport:
    """Bucket pairs by concept; zero-sample buckets are absent, not 0."""
    if not pairs:
        raise MetricsError("report of empty pair list")
    buckets: dict[ConceptFamily, list[EvalPair]] = {}
    for pair in pairs:
        buckets.setdefault(pair.concept, []).append(pair)
    return ConceptReport(
        overall_giou=giou(pairs),
        overall_ciou=ciou(pairs),
        per_concept_giou={c: giou(b) for c, b in buckets.items()},
        per_concept_ciou={c: ciou(b) for c, b in buckets.items()},
        n={c: len(b) for c, b in buckets.items()},
        total=len(pairs),
    )


def write_report(report: ConceptReport, json_path, text_path) -> None:
    from pathlib import Path

    Path(json_path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    Path(text_path).write_text(report.to_text_table() + "\n", encoding="utf-8")
