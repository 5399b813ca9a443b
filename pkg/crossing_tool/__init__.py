"""Pedestrian crossing prediction engine."""

from .version import __version__
