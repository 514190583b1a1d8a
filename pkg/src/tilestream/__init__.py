"""Tile-based adaptive streaming of anchor-based Gaussian scenes, in simulation."""
from . import cvp, dba, env, harness, scene, viewport  # noqa: F401

__version__ = "0.1.0"
