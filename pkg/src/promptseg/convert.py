"""Convert COCO instance annotations into the manifest format.

Per (image, category) pair with at least one annotation, the instance masks
union into one sample whose prompt names the category, matching the
category-level reformulation used for literal-concept training data. Only
uncompressed RLE segmentations are consumed; polygon and compressed-string
entries are skipped with a warning count.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .core import ConceptFamily, DatasetManifest, ImageRecord, Sample, save_manifest
from .maskops import MaskRLE, rle_decode, rle_encode

log = logging.getLogger(__name__)


class ConvertError(ValueError):
    pass


def convert_coco_instances(
    annotations_path: str | Path,
    images_dir: str | Path,
    out_path: str | Path,
    split: str = "train",
    prompt_template: str = "segment all the {category} in the image",
) -> Path:
    annotations_path = Path(annotations_path)
    if not annotations_path.is_file():
        raise ConvertError(f"annotations file not found: {annotations_path}")
    data = json.loads(annotations_path.read_text(encoding="utf-8"))
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise ConvertError(f"annotations file missing {key!r} section")

    images = {img["id"]: img for img in data["images"]}
    categories = {cat["id"]: cat["name"] for cat in data["categories"]}
    grouped: dict[tuple, list[dict]] = {}
    skipped = 0
    for ann in data["annotations"]:
        seg = ann.get("segmentation")
        if not isinstance(seg, dict) or not isinstance(seg.get("counts"), list):
            skipped += 1
            continue
        grouped.setdefault((ann["image_id"], ann["category_id"]), []).append(ann)
    if skipped:
        log.warning("skipped %d annotations without uncompressed RLE segmentation", skipped)

    samples = []
    images_dir = Path(images_dir)
    for (image_id, category_id), anns in sorted(grouped.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        img = images[image_id]
        record = ImageRecord(
            image_id=str(image_id),
            uri=str(images_dir / img["file_name"]),
            width=int(img["width"]),
            height=int(img["height"]),
        )
        union = np.zeros((record.height, record.width), dtype=np.uint8)
        for ann in anns:
            union |= rle_decode(MaskRLE.from_json(ann["segmentation"]))
        category = categories.get(category_id, str(category_id))
        samples.append(
            Sample(
                sample_id=f"{image_id}:{category}",
                image=record,
                prompt=prompt_template.format(category=category),
                mask=rle_encode(union),
                concept=ConceptFamily.ENTITIES,
                split=split,
                provenance="coco_instances",
            )
        )
    manifest = DatasetManifest(samples=samples, metadata={"source": str(annotations_path)})
    out_path = Path(out_path)
    save_manifest(manifest, out_path)
    return out_path
