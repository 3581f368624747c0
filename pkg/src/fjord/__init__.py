"""Factorized in-join model inference: join trees, push-down planning and execution."""

__version__ = "0.1.0"
