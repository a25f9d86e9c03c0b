"""Hybrid CNN/ViT multi-task model for label-free white blood cell phenotyping."""

__version__ = "0.1.0"
