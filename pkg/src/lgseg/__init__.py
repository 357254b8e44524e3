"""Long-tail 3D semantic segmentation with text-anchored pre-training."""

__version__ = "0.1.0"

from .catalog import UNLABELED, LabelCatalog, assign_splits, make_catalog  # noqa: E402
from .embed import AnchorPCA, EmbeddingTable  # noqa: E402
from .estimator import LanguageGroundedSegmenter  # noqa: E402
from .scene import Scene, read_scene, write_scene  # noqa: E402

__all__ = [
    "UNLABELED", "LabelCatalog", "assign_splits", "make_catalog", "AnchorPCA",
    "EmbeddingTable", "LanguageGroundedSegmenter", "Scene", "read_scene", "write_scene",
]
