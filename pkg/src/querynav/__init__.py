"""Audio-goal navigation with a when-to-ask oracle, on procedural grid worlds."""

__version__ = "0.1.0"
