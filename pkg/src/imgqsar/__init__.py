"""Image-based bioactivity regression: curation, depiction, fingerprints, models, training and analysis."""

__version__ = "0.1.0"
