"""Two-stage video prediction with GAN-based frame enhancement."""

__version__ = "0.1.0"
