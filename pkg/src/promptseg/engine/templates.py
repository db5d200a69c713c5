"""Meta-prompt templates for the data engine.

Templates are data, not code: each is a text file with `$name` placeholders
(string.Template syntax), organized as `<registry>/<concept>/<kind>.txt` for
concept-specific kinds and `<registry>/common/<kind>.txt` for the kinds
shared across concepts. The authored defaults below ship with the package
and can be exported with `TemplateRegistry.write_defaults`.
"""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass
from pathlib import Path

from ..core import ConceptFamily


class TemplateError(ValueError):
    pass


class TemplateKind(str, enum.Enum):
    SCENE = "scene"
    MASK_VERIFY = "mask_verify"
    MASK_COMPARE = "mask_compare"
    ALIGN_VERIFY = "align_verify"
    POSITIVE = "positive"
    NEGATIVE_GENERATION = "negative_generation"
    NEGATIVE_VERIFICATION = "negative_verification"


# Kinds that do not vary by concept live under the "common" directory.
SHARED_KINDS = frozenset(
    {TemplateKind.SCENE, TemplateKind.MASK_VERIFY, TemplateKind.MASK_COMPARE, TemplateKind.ALIGN_VERIFY}
)

# Placeholders each stage supplies when rendering a kind; a template may use
# any subset but nothing else.
ALLOWED_PLACEHOLDERS: dict[TemplateKind, frozenset[str]] = {
    TemplateKind.SCENE: frozenset({"min_regions", "max_regions", "max_words"}),
    TemplateKind.MASK_VERIFY: frozenset({"description"}),
    TemplateKind.MASK_COMPARE: frozenset({"description"}),
    TemplateKind.ALIGN_VERIFY: frozenset({"prompt"}),
    TemplateKind.POSITIVE: frozenset({"regions", "max_prompts"}),
    TemplateKind.NEGATIVE_GENERATION: frozenset({"regions", "max_prompts"}),
    TemplateKind.NEGATIVE_VERIFICATION: frozenset({"prompt"}),
}


@dataclass(frozen=True)
class MetaPromptTemplate:
    kind: TemplateKind
    text: str
    concept: ConceptFamily | None = None

    def __post_init__(self):
        if (self.concept is None) != (self.kind in SHARED_KINDS):
            raise TemplateError(f"kind {self.kind.value} {'must not' if self.kind in SHARED_KINDS else 'must'} carry a concept")
        unknown = self.placeholders() - ALLOWED_PLACEHOLDERS[self.kind]
        if unknown:
            raise TemplateError(f"template {self.kind.value} uses unknown placeholders {sorted(unknown)}")

    def placeholders(self) -> set[str]:
        tmpl = string.Template(self.text)
        names = set()
        for match in tmpl.pattern.finditer(self.text):
            name = match.group("named") or match.group("braced")
            if name:
                names.add(name)
        return names

    def render(self, **values) -> str:
        try:
            return string.Template(self.text).substitute(**{k: str(v) for k, v in values.items()})
        except KeyError as exc:
            raise TemplateError(f"template {self.kind.value} references missing placeholder {exc}") from exc


_SCENE = """\
You are shown one image. List the distinct regions a person would naturally
point out: objects, object parts, surfaces, and areas.

Rules:
- Return between $min_regions and $max_regions region descriptions.
- Each description uses at most $max_words words and names the category,
  visible attributes, location in the frame, and any salient relation.
- Mention only things actually visible in the image.

Respond with a JSON array of strings and nothing else.
"""

_MASK_VERIFY = """\
The first image is the original scene. The second image shows one candidate
region outlined and numbered.

Decide whether the outlined region matches this description in identity,
attributes, and spatial location:

$description

Respond with exactly one word: accept or reject.
"""

_MASK_COMPARE = """\
Both images show the same scene with a candidate region outlined for this
description:

$description

The first image is the original candidate; the second is a refined
candidate. Choose the outline with better coverage of the described region,
more precise boundaries, and fewer artifacts such as holes or spill-over.

Respond with exactly one word: original or refined.
"""

_ALIGN_VERIFY = """\
The first image is the original scene. The second image outlines the pixels
selected to answer this request:

$prompt

Accept only if the outlined pixels cover everything the request refers to,
exclude irrelevant content, and the request reasonably describes them.

Respond with exactly one word: accept or reject.
"""

_POSITIVE_HEADER = """\
The image is annotated with numbered region outlines. The regions are:

$regions

Write conversational segmentation requests for this image. Each request
must be answerable by selecting one or more of the numbered regions.
"""

_POSITIVE_FOOTER = """\
Rules:
- At most $max_prompts requests.
- Vary the reasoning style across requests.
- Never write a request that trivially names a lone object of its kind.

Respond with a JSON array of objects, each of the form
{"prompt": "...", "regions": [region numbers]} and nothing else.
"""

_POSITIVE_GUIDANCE: dict[ConceptFamily, str] = {
    ConceptFamily.ENTITIES: (
        "Target entities by open-vocabulary category and attribute composition:\n"
        "material, condition, color combinations, or unusual categories\n"
        "(\"weathered wooden furniture\", \"the bicycle with a basket\").\n"
    ),
    ConceptFamily.SPATIAL_LAYOUT: (
        "Target spatial relations, ordering, containment, and occupancy:\n"
        "relative position (\"the lamp behind the sofa\"), ordinality (\"the\n"
        "rightmost orange in the bowl\"), and layout (\"items blocking the walkway\").\n"
    ),
    ConceptFamily.RELATIONS_EVENTS: (
        "Target interactions and transient states between things: who is acting\n"
        "on what (\"the player serving the ball\"), ongoing events (\"the door\n"
        "being opened\"), and imminent actions.\n"
    ),
    ConceptFamily.AFFORDANCES_FUNCTIONS: (
        "Target what things are for and how they could be used: context-dependent\n"
        "use (\"surfaces safe for hot items\"), canonical function (\"sources of\n"
        "water\"), and improvised or counterfactual use (\"items that could prop a door\").\n"
    ),
    ConceptFamily.PHYSICS_SAFETY: (
        "Target stability, support, and hazard assessment: balance (\"objects\n"
        "likely to tip over\"), physical risk (\"sharp objects posing a hazard\"),\n"
        "and load or support relations (\"the box bearing the stack's weight\").\n"
    ),
}

_NEGATIVE_GENERATION = """\
The image is annotated with numbered region outlines. The regions are:

$regions

Write adversarial segmentation requests that sound plausible for this scene
but have NO valid target anywhere in the image. Use two strategies:
1. Reference a contextually plausible object that is absent from the scene.
2. Describe a present object with a wrong attribute or state.

$guidance
Rules: at most $max_prompts requests, each a single sentence.

Respond with a JSON array of strings and nothing else.
"""

_NEGATIVE_GUIDANCE: dict[ConceptFamily, str] = {
    ConceptFamily.ENTITIES: "Keep the requests about entity identity and attributes.",
    ConceptFamily.SPATIAL_LAYOUT: "Keep the requests about spatial arrangement that does not hold.",
    ConceptFamily.RELATIONS_EVENTS: "Keep the requests about interactions or events not occurring.",
    ConceptFamily.AFFORDANCES_FUNCTIONS: "Keep the requests about functions nothing in the scene affords.",
    ConceptFamily.PHYSICS_SAFETY: "Keep the requests about physical states or hazards not present.",
}

_NEGATIVE_VERIFICATION = """\
Look carefully at the whole image. A segmentation request follows:

$prompt

Accept only if NO region of the image validly satisfies the request, so the
only correct answer is an empty mask. If any valid target exists, reject.

Respond with exactly one word: accept or reject.
"""


def default_templates() -> list[MetaPromptTemplate]:
    templates = [
        MetaPromptTemplate(kind=TemplateKind.SCENE, text=_SCENE),
        MetaPromptTemplate(kind=TemplateKind.MASK_VERIFY, text=_MASK_VERIFY),
        MetaPromptTemplate(kind=TemplateKind.MASK_COMPARE, text=_MASK_COMPARE),
        MetaPromptTemplate(kind=TemplateKind.ALIGN_VERIFY, text=_ALIGN_VERIFY),
    ]
    for concept in ConceptFamily:
        templates.append(
            MetaPromptTemplate(
                kind=TemplateKind.POSITIVE,
                concept=concept,
                text=_POSITIVE_HEADER + "\n" + _POSITIVE_GUIDANCE[concept] + "\n" + _POSITIVE_FOOTER,
            )
        )
        templates.append(
            MetaPromptTemplate(
                kind=TemplateKind.NEGATIVE_GENERATION,
                concept=concept,
                text=_NEGATIVE_GENERATION.replace("$guidance", _NEGATIVE_GUIDANCE[concept]),
            )
        )
        templates.append(
            MetaPromptTemplate(kind=TemplateKind.NEGATIVE_VERIFICATION, concept=concept, text=_NEGATIVE_VERIFICATION)
        )
    return templates


class TemplateRegistry:
    """Lookup table from (kind, concept) to template text."""

    def __init__(self, templates: list[MetaPromptTemplate]):
        self._by_key: dict[tuple[TemplateKind, ConceptFamily | None], MetaPromptTemplate] = {}
        for tmpl in templates:
            key = (tmpl.kind, tmpl.concept)
            if key in self._by_key:
                raise TemplateError(f"duplicate template for {key}")
            self._by_key[key] = tmpl

    @classmethod
    def defaults(cls) -> "TemplateRegistry":
        return cls(default_templates())

    @classmethod
    def from_dir(cls, root: str | Path) -> "TemplateRegistry":
        """Load `<root>/<concept|common>/<kind>.txt`, falling back to the
        authored defaults for anything missing."""
        root = Path(root)
        templates = {(t.kind, t.concept): t for t in default_templates()}
        if not root.is_dir():
            raise TemplateError(f"template directory not found: {root}")
        for sub in root.iterdir():
            if not sub.is_dir():
                continue
            concept = None if sub.name == "common" else ConceptFamily(sub.name)
            for path in sorted(sub.glob("*.txt")):
                kind = TemplateKind(path.stem)
                templates[(kind, concept)] = MetaPromptTemplate(
                    kind=kind, concept=concept, text=path.read_text(encoding="utf-8")
                )
        return cls(list(templates.values()))

    def get(self, kind: TemplateKind, concept: ConceptFamily | None = None) -> MetaPromptTemplate:
        lookup_concept = None if kind in SHARED_KINDS else concept
        try:
            return self._by_key[(kind, lookup_concept)]
        except KeyError:
            raise TemplateError(f"no template for kind={kind.value} concept={lookup_concept}") from None

    def write_defaults(self, root: str | Path) -> None:
        root = Path(root)
        for tmpl in self._by_key.values():
            sub = root / (tmpl.concept.value if tmpl.concept else "common")
            sub.mkdir(parents=True, exist_ok=True)
            (sub / f"{tmpl.kind.value}.txt").write_text(tmpl.text, encoding="utf-8")
