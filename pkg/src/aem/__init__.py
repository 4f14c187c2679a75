"""Generation-correction-inference pipeline for bias-corrected synthetic choice data."""

__version__ = "0.1.0"
