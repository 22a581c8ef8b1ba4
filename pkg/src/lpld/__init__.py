"""Mean-Teacher source-free detection adaptation with low-confidence pseudo-label distillation."""

__version__ = "0.1.0"
