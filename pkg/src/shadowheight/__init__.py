"""Shadow-aware monocular heightmap estimation from RGB aerial patches."""

__version__ = "0.1.0"
