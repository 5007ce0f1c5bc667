"""Image-directory to CFF1 feature extraction."""

__version__ = "0.1.0"
