from .pipeline import EngineConfig, EngineRunState, run_pipeline
from .stages import (
    CandidatePrompt,
    GroundedRegion,
    RegionDescription,
    generate_negatives,
    stage1_describe,
    stage2_ground,
    stage3_refine,
    stage3_verify,
    stage4_generate,
    stage5_align,
)
from .templates import MetaPromptTemplate, TemplateKind, TemplateRegistry

__all__ = [
    "CandidatePrompt",
    "EngineConfig",
    "EngineRunState",
    "GroundedRegion",
    "MetaPromptTemplate",
    "RegionDescription",
    "TemplateKind",
    "TemplateRegistry",
    "generate_negatives",
    "run_pipeline",
    "stage1_describe",
    "stage2_ground",
    "stage3_refine",
    "stage3_verify",
    "stage4_generate",
    "stage5_align",
]
