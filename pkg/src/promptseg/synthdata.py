"""Synthetic shape datasets for desk-scale runs.

Images are flat backgrounds with colored axis-aligned rectangles; prompts
name a rectangle by color and the ground truth is its mask. Negative
prompts name a color absent from the image and carry an empty mask. The
generator is deterministic in its seed, so fixtures never need shipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConceptFamily, DatasetManifest, ImageRecord, Sample
from .maskops import MaskRLE, rle_encode, save_image_rgb

PALETTE = {
    "red": (214, 39, 40),
    "blue": (31, 119, 214),
    "green": (44, 160, 44),
    "orange": (255, 152, 14),
    "purple": (148, 103, 189),
    "cyan": (23, 190, 207),
    "yellow": (230, 219, 34),
    "magenta": (227, 52, 200),
}


@dataclass
class SynthPair:
    sample: Sample
    image: np.ndarray
    mask: np.ndarray


def _place_rects(rng: np.random.Generator, size: int, n: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping rectangles (y0, y1, x0, x1), each >= 22% of the side."""
    rects: list[tuple[int, int, int, int]] = []
    attempts = 0
    while len(rects) < n and attempts < 200:
        attempts += 1
        side_h = int(rng.integers(size // 4, size // 2))
        side_w = int(rng.integers(size // 4, size // 2))
        y0 = int(rng.integers(0, size - side_h))
        x0 = int(rng.integers(0, size - side_w))
        rect = (y0, y0 + side_h, x0, x0 + side_w)
        if all(rect[1] <= r[0] or r[1] <= rect[0] or rect[3] <= r[2] or r[3] <= rect[2] for r in rects):
            rects.append(rect)
    return rects


def generate_pairs(
    n_images: int,
    prompts_per_image: int = 2,
    image_size: int = 256,
    seed: int = 0,
    negatives: bool = False,
    split: str = "train",
    concept_cycle: tuple[ConceptFamily, ...] = (ConceptFamily.ENTITIES,),
    out_dir: str | Path | None = None,
) -> list[SynthPair]:
    """Build prompt-mask pairs over n_images scenes. With negatives=True,
    each image also yields one absent-color prompt with an empty mask."""
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    pairs: list[SynthPair] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        chosen = [colors[int(c)] for c in rng.choice(len(colors), size=prompts_per_image, replace=False)]
        rects = _place_rects(rng, image_size, prompts_per_image)
        bg = int(rng.integers(8, 48))
        image = np.full((image_size, image_size, 3), bg, dtype=np.uint8)
        masks = {}
        for color, (y0, y1, x0, x1) in zip(chosen, rects):
            image[y0:y1, x0:x1] = PALETTE[color]
            mask = np.zeros((image_size, image_size), dtype=np.uint8)
            mask[y0:y1, x0:x1] = 1
            masks[color] = mask
        uri = str(out_path / f"synth_{seed}_{i:03d}.png") if out_path is not None else f"synth_{seed}_{i:03d}.png"
        if out_path is not None:
            save_image_rgb(uri, image)
        record = ImageRecord(image_id=f"synth_{seed}_{i:03d}", uri=uri, width=image_size, height=image_size)
        for k, color in enumerate(chosen):
            concept = concept_cycle[(i * prompts_per_image + k) % len(concept_cycle)]
            pairs.append(
                SynthPair(
                    sample=Sample(
                        sample_id=f"{record.image_id}/p{k}",
                        image=record,
                        prompt=f"segment the {color} rectangle",
                        mask=rle_encode(masks[color]),
                        concept=concept,
                        split=split,
                        provenance="synthetic_test",
                    ),
                    image=image,
                    mask=masks[color],
                )
            )
        if negatives:
            absent = next(c for c in colors if c not in chosen)
            concept = concept_cycle[i % len(concept_cycle)]
            pairs.append(
                SynthPair(
                    sample=Sample(
                        sample_id=f"{record.image_id}/n0",
                        image=record,
                        prompt=f"segment the {absent} rectangle",
                        mask=MaskRLE.empty(image_size, image_size),
                        concept=concept,
                        split=split,
                        provenance="synthetic_test",
                        is_negative=True,
                    ),
                    image=image,
                    mask=np.zeros((image_size, image_size), dtype=np.uint8),
                )
            )
    return pairs


def pairs_manifest(pairs: list[SynthPair], metadata: dict[str, str] | None = None) -> DatasetManifest:
    return DatasetManifest(samples=[p.sample for p in pairs], metadata=metadata or {})


def in_memory_loader(pairs: list[SynthPair]):
    """Loader closure serving (image, mask) without touching disk."""
    table = {p.sample.sample_id: (p.image, p.mask) for p in pairs}

    def load(sample: Sample):
        return table[sample.sample_id]

    return load
