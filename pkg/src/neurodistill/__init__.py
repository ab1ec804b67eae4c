"""Cross-modal distillation of multi-session spike transformers into LFP models."""

__version__ = "0.1.0"
