"""Class-aware structured pruning for vision transformers on a numpy autodiff core."""

__version__ = "0.1.0"
