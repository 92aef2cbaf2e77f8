"""Distances between a real-valued vector and its quantized image.

Two ranking metrics are provided: the angle derived from the cosine
similarity, and the plain Euclidean distance.  Larger distance means the
vector sits further from its quantization bin, i.e. a worse-behaved unit,
so both metrics sort prune-first in descending order.
"""

from __future__ import annotations

import numpy as np

from qnnprune.errors import QnnError, ShapeError

METRIC_NAMES = ("angle", "euclid")


def _as_vector(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine_similarity(v, theta_v) -> float:
    """cos of the angle between a vector and its quantized image."""
    v = _as_vector(v)
    q = _as_vector(theta_v)
    if v.shape != q.shape:
        raise ShapeError(f"length mismatch: {v.size} != {q.size}")
    nv = np.linalg.norm(v)
    nq = np.linalg.norm(q)
    if nv == 0.0 or nq == 0.0:
        raise QnnError("cosine similarity undefined for a zero vector")
    return float(np.dot(v, q) / (nv * nq))


def angle_distance(v, theta_v) -> float:
    """Angle in radians between a vector and its quantized image."""
    phi = cosine_similarity(v, theta_v)
    return float(np.arccos(np.clip(phi, -1.0, 1.0)))


def binary_cosine(v) -> float:
    """Closed form of the cosine similarity for sign quantization.

    For theta = sign the general form collapses to
    ``sum|v_i| / (sqrt(sum v_i^2) * sqrt(n))``.
    """
    v = _as_vector(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise QnnError("cosine similarity undefined for a zero vector")
    return float(np.abs(v).sum() / (norm * np.sqrt(v.size)))


def euclidean_distance(v, theta_v) -> float:
    """sqrt(sum (v_i - theta(v_i))^2)."""
    v = _as_vector(v)
    q = _as_vector(theta_v)
    if v.shape != q.shape:
        raise ShapeError(f"length mismatch: {v.size} != {q.size}")
    return float(np.linalg.norm(v - q))


def distance(v, theta_v, metric: str) -> float:
    """Dispatch on metric name: 'angle' or 'euclid'."""
    if metric == "angle":
        return angle_distance(v, theta_v)
    if metric == "euclid":
        return euclidean_distance(v, theta_v)
    raise QnnError(f"unknown metric '{metric}' (known: {', '.join(METRIC_NAMES)})")


def select_keep_set(distances: dict, th: float) -> set:
    """Units whose distance falls strictly below the threshold.

    This is the retained subset; its complement is the prune candidate set.
    """
    if th < 0:
        raise QnnError("threshold must be non-negative")
    return {k for k, d in distances.items() if d < th}
