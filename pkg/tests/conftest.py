from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from promptseg.core import ConceptFamily, ImageRecord, Sample  # noqa: E402
from promptseg.maskops import rle_encode  # noqa: E402


def rect_mask(height: int, width: int, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


def make_sample(
    sample_id: str = "s1",
    prompt: str = "segment the target object",
    mask: np.ndarray | None = None,
    concept: ConceptFamily = ConceptFamily.ENTITIES,
    split: str = "train",
    provenance: str = "synthetic_test",
    height: int = 8,
    width: int = 8,
    image_id: str | None = None,
) -> Sample:
    if mask is None:
        mask = rect_mask(height, width, 2, 6, 2, 6)
    h, w = mask.shape
    rle = rle_encode(mask)
    return Sample(
        sample_id=sample_id,
        image=ImageRecord(image_id=image_id or f"img_{sample_id}", uri=f"{sample_id}.png", width=w, height=h),
        prompt=prompt,
        mask=rle,
        concept=concept,
        split=split,
        provenance=provenance,
        is_negative=rle.foreground == 0,
    )
