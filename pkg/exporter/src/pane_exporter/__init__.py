"""Torch-to-PANEW export and fixture training."""

from .convert import ExportManifest, Normalize, build_graph, export_weights
from .fixture import train_fixture

__all__ = ["ExportManifest", "Normalize", "build_graph", "export_weights", "train_fixture"]
