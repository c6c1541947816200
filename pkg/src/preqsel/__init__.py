"""Prequential description lengths, calibrated learning curves and model-selection statistics."""

__version__ = "0.1.0"
