"""Ergodicity of Levy-driven multiclass queueing diffusions in the Halfin-Whitt regime."""

__version__ = "0.1.0"
