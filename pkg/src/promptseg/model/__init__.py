from .checkpoint import load_checkpoint, save_checkpoint
from .network import (
    AdaptedPrompt,
    EmbeddingCache,
    ImageEmbedding,
    MaskPrediction,
    ModelConfig,
    PromptEncoding,
    SegmentationModel,
    build_model,
    preprocess_image,
)

__all__ = [
    "AdaptedPrompt",
    "EmbeddingCache",
    "ImageEmbedding",
    "MaskPrediction",
    "ModelConfig",
    "PromptEncoding",
    "SegmentationModel",
    "build_model",
    "load_checkpoint",
    "preprocess_image",
    "save_checkpoint",
]
