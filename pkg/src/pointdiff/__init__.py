"""Diffusion-model generation of 2-D point sets over grid-embedded stratum offsets."""

from .core import DataError, NumericError, PointSet, SeededRng, read_pointset, write_pointset

__all__ = ["DataError", "NumericError", "PointSet", "SeededRng", "read_pointset", "write_pointset"]
__version__ = "0.1.0"
