"""Nearest-neighbour cosine back-end with one reference set per domain.

The anomaly score of a clip is the smaller of its distances to the source
and target reference sets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero vector has no direction")
    return v / n


def cosine_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(min(2.0, max(0.0, 1.0 - np.dot(a, b) / (na * nb))))


@dataclass
class ReferenceSet:
    domain: str
    embeddings: np.ndarray  # (n, d), unit rows
    clip_ids: list[str]

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be source or target, got {self.domain!r}")
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] == 0 or self.embeddings.size == 0:
            raise ValueError(f"empty {self.domain} reference set")
        if len(self.clip_ids) != self.embeddings.shape[0]:
            raise ValueError("clip_ids and embeddings differ in length")

    @classmethod
    def build(cls, domain: str, vectors, clip_ids=None) -> "ReferenceSet":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.size == 0:
            raise ValueError(f"empty {domain} reference set")
        ids = list(clip_ids) if clip_ids is not None else [str(i) for i in range(len(vectors))]
        return cls(domain, _unit(vectors), ids)

    def __len__(self):
        return self.embeddings.shape[0]

    def add(self, vector, clip_id: str) -> "ReferenceSet":
        return ReferenceSet(self.domain, np.vstack([self.embeddings, _unit(vector)]),
                            self.clip_ids + [clip_id])


@dataclass
class AnomalyScore:
    clip_id: str
    score: float
    d_source: float
    d_target: float


def _distances(queries: np.ndarray, refs: ReferenceSet, chunk: int = 64) -> np.ndarray:
    # For unit vectors 1 - <a,b> == |a - b|^2 / 2; the difference form is exactly
    # zero for a query identical to a reference.
    q = _unit(np.atleast_2d(queries))
    out = np.empty((q.shape[0], len(refs)))
    for i in range(0, q.shape[0], chunk):
        diff = q[i:i + chunk, None, :] - refs.embeddings[None, :, :]
        out[i:i + chunk] = 0.5 * np.einsum("qrd,qrd->qr", diff, diff)
    return np.clip(out, 0.0, 2.0)


def knn_distances(queries, refs: ReferenceSet, k: int = 1) -> np.ndarray:
    """Per query: distance to the nearest reference, or mean of the k nearest."""
    if len(refs) == 0:
        raise ValueError("empty reference set")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = _distances(queries, refs)
    if k == 1:
        return d.min(axis=1)
    k = min(k, d.shape[1])
    return np.sort(d, axis=1)[:, :k].mean(axis=1)


def knn_min_distance(query, refs: ReferenceSet, k: int = 1) -> float:
    return float(knn_distances(query, refs, k)[0])


def score_clip(query, src: ReferenceSet, tgt: ReferenceSet, k: int = 1,
               clip_id: str = "") -> AnomalyScore:
    ds = knn_min_distance(query, src, k)
    dt = knn_min_distance(query, tgt, k)
    return AnomalyScore(clip_id, min(ds, dt), ds, dt)


def score_many(queries, clip_ids, src: ReferenceSet | None, tgt: ReferenceSet | None,
               k: int = 1) -> list[AnomalyScore]:
    """Vectorised scoring; a missing domain (single-detector mode) scores as +inf distance."""
    if src is None and tgt is None:
        raise ValueError("need at least one reference set")
    queries = np.atleast_2d(queries)
    inf = np.full(queries.shape[0], np.inf)
    ds = knn_distances(queries, src, k) if src is not None else inf
    dt = knn_distances(queries, tgt, k) if tgt is not None else inf
    return [AnomalyScore(cid, float(min(a, b)), float(a), float(b))
            for cid, a, b in zip(clip_ids, ds, dt)]


SCORE_FIELDS = ("clip_id", "machine", "score", "d_source", "d_target")


def write_scores(path, scores: list[AnomalyScore], machines: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FIELDS)
        for s, machine in zip(scores, machines):
            w.writerow([s.clip_id, machine, repr(s.score), repr(s.d_source), repr(s.d_target)])


def read_scores(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("score", "d_source", "d_target"):
            r[key] = float(r[key])
    return rows
