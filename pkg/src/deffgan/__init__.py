"""Few-shot image synthesis with a growing patch GAN and an auxiliary-classifier critic."""

__version__ = "0.1.0"
