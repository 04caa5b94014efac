"""Laplace-prior regularization (L2-SP, EWC, KFAC) for LoRA fine-tuning of small numpy networks."""

__version__ = "0.1.0"
