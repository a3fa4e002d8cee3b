"""Unsupervised 2D-to-3D human pose lifting with a model-free teacher and a
parametric body-model student, in plain numpy."""

__version__ = "0.1.0"
