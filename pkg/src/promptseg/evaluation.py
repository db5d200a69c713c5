"""Run a model over a benchmark manifest and score the predictions.

Prediction files are line-delimited JSON with a header row carrying the
model id and binarization threshold. Evaluation never aborts mid-run:
unreadable images or missing predictions become empty masks with a warning
row, so large runs always produce a report.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DatasetManifest
from .maskops import MaskRLE, load_image_rgb, rle_decode, rle_encode
from .metrics import ConceptReport, EvalPair, per_concept_report

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


class EvaluationError(RuntimeError):
    pass


@dataclass
class PredictionSet:
    model_id: str
    entries: dict[str, MaskRLE]
    threshold: float = DEFAULT_THRESHOLD
    errors: list[dict] = field(default_factory=list)


def predict_dataset(model, manifest: DatasetManifest, threshold: float = DEFAULT_THRESHOLD, cache=None) -> PredictionSet:
    """Predict a binary mask per sample at the sample's original resolution.

    Per-sample failures are recorded and produce empty predictions.
    """
    entries: dict[str, MaskRLE] = {}
    errors: list[dict] = []
    for sample in manifest.samples:
        h, w = sample.image.height, sample.image.width
        try:
            image = load_image_rgb(sample.image.uri)
            pred = model.predict(image, sample.prompt, cache=cache)
            mask = (pred.probabilities >= threshold).astype(np.uint8)
            entries[sample.sample_id] = rle_encode(mask)
        except Exception as exc:
            log.warning("prediction failed for %s: %s", sample.sample_id, exc)
            errors.append({"sample_id": sample.sample_id, "error": f"{type(exc).__name__}: {exc}"})
            entries[sample.sample_id] = MaskRLE.empty(h, w)
    return PredictionSet(model_id=getattr(model, "model_id", "model"), entries=entries, threshold=threshold, errors=errors)


def save_predictions(preds: PredictionSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"model_id": preds.model_id, "threshold": preds.threshold}, sort_keys=True)]
    for sample_id in preds.entries:
        lines.append(json.dumps({"sample_id": sample_id, "mask_rle": preds.entries[sample_id].to_json()}, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictions(path: str | Path) -> PredictionSet:
    path = Path(path)
    if not path.is_file():
        raise EvaluationError(f"predictions file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EvaluationError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    entries: dict[str, MaskRLE] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        entries[obj["sample_id"]] = MaskRLE.from_json(obj["mask_rle"])
    return PredictionSet(
        model_id=str(header.get("model_id", "model")),
        entries=entries,
        threshold=float(header.get("threshold", DEFAULT_THRESHOLD)),
    )


@dataclass
class EvaluationResult:
    report: ConceptReport
    positives_only: ConceptReport | None
    missing: list[str]

    def to_json(self) -> dict:
        out = {"with_negatives": self.report.to_json(), "missing_predictions": self.missing}
        if self.positives_only is not None:
            out["positives_only"] = self.positives_only.to_json()
        return out

    def to_text(self) -> str:
        parts = ["All samples", self.report.to_text_table()]
        if self.positives_only is not None:
            parts += ["", "Positives only", self.positives_only.to_text_table()]
        if self.missing:
            parts += ["", f"missing predictions treated as empty: {len(self.missing)}"]
        return "\n".join(parts)


def evaluate_predictions(preds: PredictionSet, manifest: DatasetManifest) -> EvaluationResult:
    """Score predictions against the manifest, reporting the full set and,
    when negatives are present, a positives-only variant."""
    known = {s.sample_id for s in manifest.samples}
    unknown = set(preds.entries) - known
    if unknown:
        raise EvaluationError(f"predictions reference unknown sample_ids: {sorted(unknown)[:5]}")
    pairs: list[EvalPair] = []
    positive_pairs: list[EvalPair] = []
    missing: list[str] = []
    for sample in manifest.samples:
        gt = rle_decode(sample.mask)
        entry = preds.entries.get(sample.sample_id)
        if entry is None:
            missing.append(sample.sample_id)
            pred = np.zeros_like(gt)
        else:
            pred = rle_decode(entry)
        pair = EvalPair(sample_id=sample.sample_id, concept=sample.concept, gt=gt, pred=pred)
        pairs.append(pair)
        if not sample.is_negative:
            positive_pairs.append(pair)
    if missing:
        log.warning("%d samples had no prediction; treated as empty", len(missing))
    report = per_concept_report(pairs)
    positives_only = None
    if len(positive_pairs) != len(pairs) and positive_pairs:
        positives_only = per_concept_report(positive_pairs)
    return EvaluationResult(report=report, positives_only=positives_only, missing=missing)


def write_evaluation(result: EvaluationResult, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    json_path.write_text(json.dumps(result.to_json(), indent=2) + "\n", encoding="utf-8")
    text_path.write_text(result.to_text() + "\n", encoding="utf-8")
    return {"json": json_path, "text": text_path}
