"""Desk-scale sim-to-real runway detection experiments.

Central proxy assumption: the "real" domain here is a richer procedural
render (texture noise, vignetting, hue jitter), not photographs. The
domain gap is controllable and license-free, and every qualitative
claim of the toolkit is about orderings across training strategies,
not absolute accuracy.
"""

__version__ = "0.1.0"
