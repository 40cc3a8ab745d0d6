"""Retrieval, re-identification, and classification metrics.

Average precision follows the standard convention: precision at each
relevant position, averaged over the number of relevant items (documented
prominently because AP conventions shift absolute numbers). Distance ties
in rankings break by ascending gallery id, so every metric is
deterministic.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import as_feature_matrix, as_vector, check_same_dim
from .model import ClassifierHead, EmbeddingModel, embed

__all__ = [
    "RankedResult",
    "EvalReport",
    "rank_gallery",
    "average_precision",
    "precision_at_k",
    "cmc_curve",
    "classification_accuracy",
    "evaluate_retrieval",
    "save_report_csv",
    "load_report_csv",
]


@dataclass
class RankedResult:
    """One query's gallery ordered by ascending embedding distance."""

    query_id: int
    gallery_ids: np.ndarray  # permutation of the gallery, best first
    relevance: np.ndarray  # bool, aligned with gallery_ids

    def __post_init__(self):
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        self.relevance = np.asarray(self.relevance, dtype=bool)
        if self.gallery_ids.shape != self.relevance.shape:
            raise ValueError("gallery_ids and relevance must align")


def rank_gallery(query, gallery, gallery_ids=None, relevance=None, exclude_identical_id=False) -> RankedResult:
    """Sort the gallery by squared distance to the query.

    Ties break by ascending gallery id. ``exclude_identical_id`` drops
    gallery entries whose id equals the query's own id (for protocols
    where the query row also appears in the gallery).
    """
    query_vec = as_vector(query if not isinstance(query, tuple) else query[1], "query")
    query_id = -1
    if isinstance(query, tuple):
        query_id = int(query[0])
    gallery = as_feature_matrix(gallery, "gallery")
    check_same_dim(query_vec, gallery, "query", "gallery")
    n = gallery.shape[0]
    if gallery_ids is None:
        gallery_ids = np.arange(n)
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    if relevance is None:
        relevance = np.zeros(n, dtype=bool)
    relevance = np.asarray(relevance, dtype=bool)
    keep = np.ones(n, dtype=bool)
    if exclude_identical_id:
        keep = gallery_ids != query_id
    diff = gallery[keep] - query_vec
    dists = np.einsum("ij,ij->i", diff, diff)
    ids = gallery_ids[keep]
    rel = relevance[keep]
    if ids.size == 0:
        raise ValueError("empty gallery")
    order = np.lexsort((ids, dists))  # distance first, then id
    return RankedResult(query_id=query_id, gallery_ids=ids[order], relevance=rel[order])


def average_precision(result: RankedResult) -> float:
    """Mean of precision@k over the relevant positions k.

    AP = (1/R) * sum over relevant ranks k of (#relevant in top k)/k.
    Requires at least one relevant item.
    """
    rel = result.relevance
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError(f"query {result.query_id} has no relevant gallery item")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float((hits[rel] / ranks[rel]).sum() / n_rel)


def precision_at_k(result: RankedResult, k: int) -> float:
    """Fraction of relevant items in the top k (k clamped to gallery size)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    size = result.relevance.size
    if k > size:
        warnings.warn(f"precision@{k} clamped to gallery size {size}")
        k = size
    return float(result.relevance[:k].sum() / k)


def cmc_curve(results: list[RankedResult], max_rank: int) -> np.ndarray:
    """Cumulative match curve: cmc[k-1] = fraction of queries whose first
    relevant item appears at rank <= k.

    Every query must have a relevant gallery item (a ReID gallery contains
    the identity by construction).
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    if not results:
        raise ValueError("no queries")
    curve = np.zeros(max_rank)
    for res in results:
        hits = np.flatnonzero(res.relevance)
        if hits.size == 0:
            raise ValueError(f"query {res.query_id} has no relevant gallery item")
        first = hits[0]  # 0-based rank of first match
        if first < max_rank:
            curve[first:] += 1.0
    return curve / len(results)


def classification_accuracy(model: EmbeddingModel, head: ClassifierHead, features, labels) -> float:
    """Fraction of samples whose argmax logit equals the label.

    Ties resolve to the lowest class index.
    """
    embedded = embed(model, features)
    labels = np.asarray(labels)
    logits = head.logits(embedded)
    pred = np.argmax(logits, axis=1)  # first max = lowest class index
    return float(np.mean(pred == labels))


@dataclass
class EvalReport:
    """Retrieval metrics plus optional classification accuracy."""

    map_score: float
    precision_at: dict[int, float]
    cmc: np.ndarray
    classification_accuracy: float | None = None
    n_queries: int = 0
    n_excluded_queries: int = 0

    def __post_init__(self):
        self.cmc = np.asarray(self.cmc, dtype=np.float64)
        if np.any(np.diff(self.cmc) < 0):
            raise ValueError("CMC curve must be non-decreasing")
        for name, v in [("mAP", self.map_score), *self.precision_at.items()]:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric {name} out of [0, 1]: {v}")

    def rows(self) -> list[tuple[str, str, float]]:
        """(metric, k, value) rows in a stable order."""
        out = [("map", "", self.map_score)]
        for k in sorted(self.precision_at):
            out.append(("precision_at", str(k), self.precision_at[k]))
        for i, v in enumerate(self.cmc, start=1):
            out.append(("cmc", str(i), float(v)))
        if self.classification_accuracy is not None:
            out.append(("accuracy", "", self.classification_accuracy))
        return out

    def format_table(self) -> str:
        lines = [f"{'metric':<14}{'k':>6}  value", "-" * 30]
        for metric, k, value in self.rows():
            lines.append(f"{metric:<14}{k:>6}  {value:.6f}")
        return "\n".join(lines)


def evaluate_retrieval(
    query_features,
    query_classes,
    gallery_features,
    gallery_classes,
    topk=(1, 5),
    max_rank: int = 20,
    query_ids=None,
    gallery_ids=None,
    exclude_identical_id=False,
) -> EvalReport:
    """Rank every query against the gallery and aggregate mAP, mean
    precision@K, and the CMC curve.

    Relevance means same class label. Queries with no relevant gallery item
    are excluded from mAP and precision with a warning; CMC requires all
    queries to have a match and is computed over the included ones.
    """
    Q = as_feature_matrix(query_features, "query_features")
    G = as_feature_matrix(gallery_features, "gallery_features")
    query_classes = np.asarray(query_classes)
    gallery_classes = np.asarray(gallery_classes)
    if query_ids is None:
        query_ids = np.arange(Q.shape[0])
    if gallery_ids is None:
        gallery_ids = np.arange(G.shape[0])
    max_rank = min(max_rank, G.shape[0])
    results = []
    n_excluded = 0
    for qi in range(Q.shape[0]):
        rel = gallery_classes == query_classes[qi]
        res = rank_gallery(
            (int(query_ids[qi]), Q[qi]),
            G,
            gallery_ids=gallery_ids,
            relevance=rel,
            exclude_identical_id=exclude_identical_id,
        )
        if not res.relevance.any():
            warnings.warn(f"query {query_ids[qi]} has no relevant gallery item; excluded")
            n_excluded += 1
            continue
        results.append(res)
    if not results:
        raise ValueError("no query has a relevant gallery item")
    aps = [average_precision(r) for r in results]
    precisions = {int(k): float(np.mean([precision_at_k(r, int(k)) for r in results])) for k in topk}
    return EvalReport(
        map_score=float(np.mean(aps)),
        precision_at=precisions,
        cmc=cmc_curve(results, max_rank),
        n_queries=len(results),
        n_excluded_queries=n_excluded,
    )


def save_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "k", "value"])
        for metric, k, value in report.rows():
            writer.writerow([metric, k, repr(value)])


def load_report_csv(path) -> dict[tuple[str, str], float]:
    """Read a report CSV back into {(metric, k) -> value}."""
    out = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["metric", "k", "value"]:
            raise ValueError(f"{path}:1: expected header metric,k,value")
        for row in reader:
            if not row:
                continue
            out[(row[0], row[1])] = float(row[2])
    return out
