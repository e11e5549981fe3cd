"""Consistent map-based visual-inertial localization with sparse
Cholesky-factored map information and Schmidt updates."""

__version__ = "0.1.0"
