"""Category-agnostic keypoint estimation with keypoint attention refinement, in numpy."""

__version__ = "0.1.0"
