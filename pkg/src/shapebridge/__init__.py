"""Shape-conditioned volumetric bridge synthesis and evaluation toolkit."""

__version__ = "0.1.0"
