"""Synthetic traffic-sign augmentation: sign removal, generative sign embedding, placement sampling and metrics."""

from __future__ import annotations

from .config import Config, derive_seed
from .core import (NUM_CLASSES, Annotation, BBox, ClassTaxonomy, DatasetManifest, FrameRecord, Patch, Provenance,
                   SignIcon)

__version__ = "0.1.0"

__all__ = [
    "NUM_CLASSES", "Annotation", "BBox", "ClassTaxonomy", "Config", "DatasetManifest", "FrameRecord", "Patch",
    "Provenance", "SignIcon", "derive_seed", "__version__",
]
