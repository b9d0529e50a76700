"""Retrieval (mAP, CMC@1) and cluster-geometry (compactness, Calinski-Harabasz) metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels


class DegenerateClusterError(ValueError):
    """Within-identity dispersion is zero, so CH is unbounded."""


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (M, D)
    labels: np.ndarray  # (M,)
    role: str = "gallery"
    views: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) < 1:
            raise ValueError("an embedding set needs at least one (D,) vector")
        if len(self.labels) != len(self.vectors):
            raise ValueError(f"{len(self.labels)} labels for {len(self.vectors)} vectors")
        if self.role not in ("query", "gallery"):
            raise ValueError(f"role must be query or gallery, got {self.role!r}")


@dataclass
class MetricsReport:
    map: float
    cmc1: float
    cp: float
    ch: float | None
    epoch: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _as_set(x, labels=None, role="gallery") -> EmbeddingSet:
    return x if isinstance(x, EmbeddingSet) else EmbeddingSet(x, labels, role)


def _dense_labels(labels: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(labels, return_inverse=True)
    return inv.astype(np.int64), len(uniq)


def compactness(embeddings: EmbeddingSet) -> tuple[float, np.ndarray]:
    """Mean Euclidean distance to the identity centre, averaged over identities."""
    x = np.ascontiguousarray(embeddings.vectors)
    if x.size == 0:
        raise ValueError("compactness of an empty set")
    lab, k = _dense_labels(embeddings.labels)
    per_id, _, _ = kernels.cluster_stats(x, lab, k)
    return float(np.mean(per_id)), np.asarray(per_id)


def calinski_harabasz(embeddings: EmbeddingSet) -> float:
    """[B / (k-1)] / [W / (M-k)] over identity clusters."""
    x = np.ascontiguousarray(embeddings.vectors)
    lab, k = _dense_labels(embeddings.labels)
    m = len(x)
    if k < 2:
        raise ValueError(f"Calinski-Harabasz needs >= 2 identities, got {k}")
    if m <= k:
        raise ValueError(f"Calinski-Harabasz needs more points ({m}) than identities ({k})")
    _, within, between = kernels.cluster_stats(x, lab, k)
    if within == 0.0:
        raise DegenerateClusterError("zero within-identity dispersion")
    return float((between / (k - 1)) / (within / (m - k)))


def retrieval_eval(query: EmbeddingSet, gallery: EmbeddingSet) -> tuple[float, float]:
    """(mAP, CMC@1) ranking the gallery by Euclidean distance, ties by gallery index."""
    missing = np.setdiff1d(query.labels, gallery.labels)
    if missing.size:
        raise ValueError(f"query identities absent from gallery: {missing.tolist()}")
    dist = kernels.pairwise_sq_dist(np.ascontiguousarray(query.vectors), np.ascontiguousarray(gallery.vectors))
    ap, top1 = kernels.retrieval_ap(dist, query.labels, gallery.labels)
    return float(np.mean(ap)), float(np.mean(top1))


def evaluate_embeddings(q_vectors, q_labels, g_vectors, g_labels, epoch: int = 0) -> MetricsReport:
    query = EmbeddingSet(q_vectors, q_labels, "query")
    gallery = EmbeddingSet(g_vectors, g_labels, "gallery")
    m_ap, cmc1 = retrieval_eval(query, gallery)
    both = EmbeddingSet(np.concatenate([query.vectors, gallery.vectors]),
                        np.concatenate([query.labels, gallery.labels]))
    cp, _ = compactness(both)
    try:
        ch = calinski_harabasz(both)
    except DegenerateClusterError:
        ch = None
    for name, v in (("map", m_ap), ("cmc1", cmc1), ("cp", cp)):
        if not math.isfinite(v):
            raise ValueError(f"metric {name} is not finite")
    return MetricsReport(m_ap, cmc1, cp, ch, epoch)
