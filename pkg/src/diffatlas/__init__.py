"""Desk-scale segmentation lab: four paradigms, one phantom benchmark."""

from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
