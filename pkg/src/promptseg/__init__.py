"""Language-conditioned image segmentation toolkit: synthetic data engine,
promptable segmentation model, training curriculum, evaluation metrics, and
a human-verification review service."""

__version__ = "0.1.0"
