"""Compact dual-encoder response selection with quantization-aware training."""

__version__ = "0.1.0"
