"""PCK, AUC and NME over normalized keypoint distances."""
from __future__ import annotations

import numpy as np


def normalized_distances(pred, gt, normalizer) -> np.ndarray:
    if np.any(np.asarray(normalizer) <= 0):
        raise ValueError("normalizer must be positive")
    d = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)
    return d / np.asarray(normalizer, float)[..., None] if np.ndim(normalizer) else d / normalizer


def pck(pred, gt, visibility, normalizer: float, threshold: float = 0.2) -> float | None:
    """Fraction of visible keypoints within ``threshold * normalizer``.

    Returns ``None`` when nothing is visible (the episode is skipped).
    """
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    vis = np.asarray(visibility, bool)
    if not vis.any():
        return None
    d = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1)[vis]
    return float(np.mean(d <= threshold * normalizer))


def pck_from_distances(distances, threshold: float = 0.2) -> float | None:
    d = np.asarray(distances, float)
    return float(np.mean(d <= threshold)) if d.size else None


def auc(distances, t_max: float = 0.2, steps: int = 20) -> float | None:
    """Trapezoidal area under PCK(t) on ``[0, t_max]`` divided by ``t_max``."""
    d = np.asarray(distances, float)
    if d.size == 0:
        return None
    ts = np.linspace(0.0, t_max, steps + 1)
    curve = (d[None, :] <= ts[:, None]).mean(axis=1)
    return float(min(1.0, np.trapezoid(curve, ts) / t_max))


def nme(distances) -> float | None:
    d = np.asarray(distances, float)
    return float(d.mean()) if d.size else None
