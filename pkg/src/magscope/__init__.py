"""Magnification-level recognition for microscopy snapshots.

Pipeline: synthetic slide pyramids -> center-aligned patches at 2.5x-40x
-> LBP histograms or pooled CNN embeddings -> random-forest / shallow-MLP
classifiers -> 5-fold cross-validated metrics.
"""

__version__ = "0.1.0"

from .levels import MagLevel, CANONICAL_LABELS, CANONICAL_ORDER  # noqa: F401
from .store import FeatureStore  # noqa: F401
