"""Deterministic three-image fixture scenario for engine tests.

Flat-colored rectangles on black backgrounds make the flood-fill segmenter
mock return exact shapes, and rule-scripted VLM responses drive every gate:
word-limit drops, truncation, no-detection, consistency rejects, refine
original/refined picks, dangling and trivial prompt pruning, alignment
rejects, and negative pairing quotas.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from promptseg.backends import MockDetector, MockVlm, SyntheticSegmenter, VlmRule, image_key
from promptseg.core import ConceptFamily, ImageRecord
from promptseg.maskops import save_image_rgb

# Template anchor phrases (stable substrings of the shipped default templates).
SCENE_MARK = "List the distinct regions"
VERIFY_MARK = "attributes, and spatial location"
COMPARE_MARK = "the second is a refined"
ALIGN_MARK = "The second image outlines the pixels"
NEG_VERIFY_MARK = "NO region of the image validly satisfies"
ENTITIES_MARK = "attribute composition"
PHYSICS_MARK = "hazard assessment"
NEG_ENTITIES_MARK = "entity identity and attributes"
NEG_PHYSICS_MARK = "physical states or hazards"

CONCEPTS = (ConceptFamily.ENTITIES, ConceptFamily.PHYSICS_SAFETY)

LONG_DESCRIPTION = (
    "a sixteen word description that goes on and on and on and on and on and on padding"
)

ALPHA_DESCRIPTIONS = [
    "bright red crate near the upper left corner",
    "long green bench along the lower right side",
    "weathered gray floor spanning the scene",
    LONG_DESCRIPTION,
    "dusty window frame high on the back wall",
    "small blue pebble beside the crate",
]

BETA_DESCRIPTIONS = [
    "blue plastic bin on the left shelf",
    "yellow foam mat in the lower right",
    "filler region three in the middle",
    "filler region four near the top",
    "filler region five by the corner",
    "filler region six on the side",
    "filler region seven at the back",
    "filler region eight out of frame",
    "filler region nine past the limit",
]

GAMMA_DESCRIPTIONS = [
    "a shiny parked car in the center",
    "smooth dark pavement around the car",
    "faint skid marks near the bottom edge",
    "distant fence line across the top",
    "pale curb along the left edge",
]


def _image(rects: list[tuple[tuple[int, int, int, int], tuple[int, int, int]]]) -> np.ndarray:
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    for (y0, y1, x0, x1), color in rects:
        img[y0:y1, x0:x1] = color
    return img


def build_images(root: Path) -> tuple[list[ImageRecord], dict[str, np.ndarray]]:
    pixels = {
        "alpha": _image([((8, 24, 8, 24), (220, 30, 30)), ((40, 56, 36, 60), (30, 200, 60))]),
        "beta": _image([((10, 30, 6, 26), (40, 60, 230)), ((34, 60, 30, 58), (250, 220, 40))]),
        "gamma": _image([((20, 44, 20, 44), (200, 40, 200))]),
    }
    records = []
    for name, arr in pixels.items():
        path = root / f"{name}.png"
        save_image_rgb(path, arr)
        records.append(ImageRecord(image_id=name, uri=str(path), width=64, height=64))
    return records, pixels


def detector_table() -> dict[str, list[int]]:
    return {
        "*|bright red crate near the upper left corner": [6, 6, 26, 26],
        "*|long green bench along the lower right side": [34, 38, 62, 58],
        "*|dusty window frame high on the back wall": [8, 28, 18, 38],
        "*|blue plastic bin on the left shelf": [4, 8, 28, 32],
        "*|yellow foam mat in the lower right": [28, 32, 60, 62],
        "*|a shiny parked car in the center": [18, 18, 46, 46],
    }


def vlm_rules(pixels: dict[str, np.ndarray]) -> list[VlmRule]:
    keys = {name: image_key(arr)[:16] for name, arr in pixels.items()}
    return [
        # stage 1: one scripted description list per image
        VlmRule(contains=SCENE_MARK, image_key=keys["alpha"], text=json.dumps(ALPHA_DESCRIPTIONS)),
        VlmRule(contains=SCENE_MARK, image_key=keys["beta"], text=json.dumps(BETA_DESCRIPTIONS)),
        VlmRule(contains=SCENE_MARK, image_key=keys["gamma"], text=json.dumps(GAMMA_DESCRIPTIONS)),
        # stage 3 consistency: the window frame description is a bad grounding
        VlmRule(contains=(VERIFY_MARK, "dusty window frame"), text="reject"),
        VlmRule(contains=VERIFY_MARK, text="accept"),
        # stage 3 refinement choice: keep the bench's original, refine the rest
        VlmRule(contains=(COMPARE_MARK, "long green bench"), text="original"),
        VlmRule(contains=COMPARE_MARK, text="refined"),
        # stage 4 prompt generation; requests carry the numbered overlay, so
        # rules match on the region listing text rather than the image hash
        VlmRule(
            contains=(ENTITIES_MARK, "bright red crate"),
            text=json.dumps(
                [
                    {"prompt": "select every handmade wooden item", "regions": [1, 2]},
                    {"prompt": "outline the mysterious artifact", "regions": [9]},
                    {"prompt": "segment the bench", "regions": [2]},
                    {"prompt": "highlight the weathered storage crate", "regions": [1]},
                ]
            ),
        ),
        VlmRule(
            contains=(ENTITIES_MARK, "a shiny parked car"),
            text=json.dumps([{"prompt": "segment the car", "regions": [1]}]),
        ),
        VlmRule(
            contains=ENTITIES_MARK,
            text=json.dumps([{"prompt": "select the container suited for sorting small parts", "regions": [1]}]),
        ),
        VlmRule(
            contains=(PHYSICS_MARK, "long green bench"),
            text=json.dumps([{"prompt": "flag objects that could topple from the stack", "regions": [2]}]),
        ),
        VlmRule(
            contains=PHYSICS_MARK,
            text=json.dumps([{"prompt": "outline surfaces where a drink might spill onto electronics", "regions": [2]}]),
        ),
        # stage 5 alignment: reject the physics prompt on alpha, accept the rest
        VlmRule(contains=(ALIGN_MARK, "topple"), text="reject"),
        VlmRule(contains=ALIGN_MARK, text="accept"),
        # negative generation
        VlmRule(
            contains=NEG_ENTITIES_MARK,
            image_key=keys["alpha"],
            text=json.dumps(["select the leather sofa", "segment the wine glass", "outline the ceramic vase"]),
        ),
        VlmRule(contains=NEG_ENTITIES_MARK, text=json.dumps(["segment the glass jar"])),
        VlmRule(contains=NEG_PHYSICS_MARK, text=json.dumps(["point out the open flame"])),
        # negative verification: the sofa is actually present, the rest absent
        VlmRule(contains=(NEG_VERIFY_MARK, "leather sofa"), text="reject"),
        VlmRule(contains=NEG_VERIFY_MARK, text="accept"),
    ]


class CountingVlm:
    """MockVlm wrapper sharing a mutable call counter across instances."""

    def __init__(self, rules, counter: list[int]):
        self._mock = MockVlm(rules=rules)
        self._counter = counter

    def complete(self, req):
        self._counter[0] += 1
        return self._mock.complete(req)


def build_backends(pixels: dict[str, np.ndarray], counter: list[int] | None = None):
    rules = vlm_rules(pixels)
    vlm = CountingVlm(rules, counter) if counter is not None else MockVlm(rules=rules)
    return vlm, MockDetector(table=detector_table()), SyntheticSegmenter(box_mode="box_fill")
