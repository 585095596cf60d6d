"""Point-set evaluation metrics: symmetric Chamfer distance and F-score.

Nearest-neighbor queries use a KD-tree; tests pin the results against a
brute-force double loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def _as_points(x, name) -> np.ndarray:
    pts = np.asarray(x, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError(f"{name} point set must be nonempty")
    return pts


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of a to its nearest neighbor in b.

    The KD-tree supplies the neighbor index only; the distance is
    recomputed with the same expression a brute-force scan would use, so
    accelerated and exhaustive results agree bitwise."""
    _, idx = cKDTree(b).query(a, k=1)
    idx = np.atleast_1d(idx)
    return np.sqrt(np.sum((a - b[idx]) ** 2, axis=1))


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean nearest distance, both ways, halved."""
    a = _as_points(a, "first")
    b = _as_points(b, "second")
    return 0.5 * (float(np.mean(_nearest(a, b))) + float(np.mean(_nearest(b, a))))


def bounding_box_diagonal(points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def f_score(a, b, threshold_fraction: float) -> float:
    """F-score (percent) at a distance threshold.

    The threshold is ``threshold_fraction`` of the bounding-box diagonal
    of b (the reference set). Precision is the share of a within the
    threshold of b, recall the share of b within the threshold of a, and
    the score is their harmonic mean scaled to percent (0 when both are
    zero).
    """
    if threshold_fraction <= 0.0:
        raise ValueError("threshold_fraction must be positive")
    a = _as_points(a, "first")
    b = _as_points(b, "second")
    threshold = threshold_fraction * bounding_box_diagonal(b)
    precision = float(np.mean(_nearest(a, b) <= threshold))
    recall = float(np.mean(_nearest(b, a) <= threshold))
    if precision + recall == 0.0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricReport:
    """Chamfer distance plus F-scores keyed by threshold fraction."""

    chamfer: float
    f_scores: dict

    def __post_init__(self):
        if self.chamfer < 0.0:
            raise ValueError("chamfer distance cannot be negative")
        for fraction, score in self.f_scores.items():
            if not 0.0 <= score <= 100.0:
                raise ValueError(f"F-score at {fraction} outside [0, 100]")

    def to_text(self) -> str:
        lines = [f"chamfer\t{self.chamfer!r}"]
        for fraction in sorted(self.f_scores):
            lines.append(f"f_score@{fraction:g}\t{self.f_scores[fraction]!r}")
        return "\n".join(lines) + "\n"


def evaluate(reconstructed, reference, threshold_fractions=(0.02,)) -> MetricReport:
    """Compare two point sets at one or more F-score thresholds."""
    return MetricReport(
        chamfer=chamfer_distance(reconstructed, reference),
        f_scores={
            float(f): f_score(reconstructed, reference, float(f))
            for f in threshold_fractions
        },
    )
