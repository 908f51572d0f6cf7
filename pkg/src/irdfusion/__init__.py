"""Iterative relation-map difference guided fusion of paired RGB/thermal feature maps."""

__version__ = "0.1.0"
