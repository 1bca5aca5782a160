"""mvpartseg: hierarchical multi-view 3D point cloud part segmentation.

Per-view 2D instance/part masks are transferred onto a 3D point cloud in
two stages — top-view instance assignment, then per-instance multi-view
back-projection — and fused into consistent per-point labels by
confidence-weighted Bayesian updating with density-based cleanup.
"""

__version__ = "0.1.0"

from .core import (
    CameraView,
    ClassCatalog,
    PointCloud,
    SegmentationResult,
    argmax_with_confidence,
    normalize,
)
from .fusion import FusionConfig, ViewConfidence
from .projection import MaskSet, MatchConfig, Region
from .renderer import RenderConfig, RenderedView

__all__ = [
    "CameraView",
    "ClassCatalog",
    "FusionConfig",
    "MaskSet",
    "MatchConfig",
    "PointCloud",
    "Region",
    "RenderConfig",
    "RenderedView",
    "SegmentationResult",
    "ViewConfidence",
    "argmax_with_confidence",
    "normalize",
    "__version__",
]
