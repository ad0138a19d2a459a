"""Long-video masked autoencoding with adaptive decoder masking."""

__version__ = "0.1.0"
