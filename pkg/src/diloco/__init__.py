"""DiLoCo: local-SGD training with periodic pseudo-gradient averaging."""

__version__ = "0.1.0"
