"""Exhaustive cosine retrieval over aggregated track embeddings.

A track embedding is the L2-normalized mean of its segment embeddings.
Ranking a query against a catalog scores every entry (no pruning), sorts
by descending similarity with ties broken by ascending track id, and
drops the query's own catalog entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurestore import TeacherEmbedding, read_feature_file, write_feature_file


@dataclass
class TrackEmbedding:
    track_id: str
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 1:
            raise ValueError(f"track embedding must be 1-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"track {self.track_id!r}: embedding has non-finite entries")
        if not self.track_id:
            raise ValueError("empty track_id")


@dataclass
class RankedList:
    query_id: str
    track_ids: list[str]
    scores: list[float]

    def __post_init__(self) -> None:
        if len(self.track_ids) != len(self.scores):
            raise ValueError("track_ids and scores lengths differ")


def aggregate_track(track_id: str, segment_embeddings: list[np.ndarray] | np.ndarray) -> TrackEmbedding:
    """Arithmetic mean of the segment embeddings (cosine scoring normalizes later)."""
    if isinstance(segment_embeddings, (list, tuple)) and not segment_embeddings:
        raise ValueError(f"track {track_id!r}: no segment embeddings to aggregate")
    mat = np.asarray(segment_embeddings, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError(f"expected a non-empty 2-D stack of embeddings, got shape {mat.shape}")
    mean = mat.mean(axis=0)
    if np.linalg.norm(mean) == 0.0:
        raise ValueError(f"track {track_id!r}: segment embeddings average to the zero vector")
    return TrackEmbedding(track_id=track_id, data=mean)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


def _order(scored: list[tuple[float, str]]) -> list[tuple[float, str]]:
    return sorted(scored, key=lambda pair: (-pair[0], pair[1]))


def rank_catalog(query: TrackEmbedding, catalog: list[TrackEmbedding]) -> RankedList:
    """Score every catalog entry against the query; self-matches are dropped."""
    scored = [(cosine_similarity(query.data, entry.data), entry.track_id)
              for entry in catalog if entry.track_id != query.track_id]
    if not scored:
        raise ValueError(f"catalog is empty after removing query {query.track_id!r}")
    ordered = _order(scored)
    return RankedList(query_id=query.track_id,
                      track_ids=[tid for _, tid in ordered],
                      scores=[s for s, _ in ordered])


def rank_all(queries: list[TrackEmbedding], catalog: list[TrackEmbedding]) -> list[RankedList]:
    """Rank every query against the catalog with one normalized matrix product.

    Identical results to per-query `rank_catalog`, including tie-breaks.
    """
    if not queries:
        return []
    if not catalog:
        raise ValueError("catalog is empty")

    def normalized(entries: list[TrackEmbedding]) -> np.ndarray:
        M = np.stack([e.data for e in entries])
        norms = np.linalg.norm(M, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("cosine similarity undefined for a zero vector")
        return M / norms[:, None]

    S = normalized(queries) @ normalized(catalog).T
    catalog_ids = [e.track_id for e in catalog]
    out = []
    for qi, q in enumerate(queries):
        scored = [(float(S[qi, ci]), tid)
                  for ci, tid in enumerate(catalog_ids) if tid != q.track_id]
        if not scored:
            raise ValueError(f"catalog is empty after removing query {q.track_id!r}")
        ordered = _order(scored)
        out.append(RankedList(q.track_id,
                              [tid for _, tid in ordered],
                              [s for s, _ in ordered]))
    return out


# --- persistence ---------------------------------------------------------

def save_track_embeddings(path: str | Path, embeddings: list[TrackEmbedding]) -> None:
    """Binary single-vector records plus a JSON id sidecar (<path>.ids.json).

    The binary container carries no string field, so the track ids travel in
    a sidecar listing them in record order.
    """
    path = Path(path)
    records = [TeacherEmbedding(segment_index=i, data=e.data.astype(np.float32))
               for i, e in enumerate(embeddings)]
    write_feature_file(path, records)
    sidecar = path.with_name(path.name + ".ids.json")
    sidecar.write_text(json.dumps([e.track_id for e in embeddings]))


def load_track_embeddings(path: str | Path) -> list[TrackEmbedding]:
    path = Path(path)
    sidecar = path.with_name(path.name + ".ids.json")
    ids = json.loads(sidecar.read_text())
    records = read_feature_file(path)
    if len(ids) != len(records):
        raise ValueError(f"{path}: id sidecar lists {len(ids)} tracks but file holds {len(records)}")
    return [TrackEmbedding(track_id=tid, data=rec.data.astype(np.float64))
            for tid, rec in zip(ids, records)]


def write_rankings(path: str | Path, rankings: list[RankedList]) -> None:
    """One JSON object per line: {"query": ..., "ranking": [...], "scores": [...]}."""
    with open(path, "w") as fh:
        for r in rankings:
            print(json.dumps({"query": r.query_id, "ranking": r.track_ids,
                              "scores": r.scores}), file=fh)


def read_rankings(path: str | Path) -> list[RankedList]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            out.append(RankedList(query_id=doc["query"], track_ids=doc["ranking"],
                                  scores=doc["scores"]))
    return out
