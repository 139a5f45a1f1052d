"""Numerics for evaluation: cosine similarity, the temperature-scaled
contrastive loss, Precision@1 / Recall@K, rank-based hard-negative mining,
and the linear-log data-scaling fit.

Ranking ties break by document index ascending everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .images import EmbeddingMatrix


@dataclass(frozen=True)
class LossParams:
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass
class EvalInputs:
    """Embeddings plus gold relevance, resolved to matrix indices on demand."""

    query_vecs: EmbeddingMatrix
    doc_vecs: EmbeddingMatrix
    gold: dict[str, set[str]]

    def __post_init__(self):
        if self.query_vecs.dim != self.doc_vecs.dim:
            raise ValueError(
                f"query dim {self.query_vecs.dim} != doc dim {self.doc_vecs.dim}"
            )
        for qid, docs in self.gold.items():
            if qid not in self.query_vecs:
                raise ValueError(f"gold query id {qid!r} missing from query embeddings")
            for did in docs:
                if did not in self.doc_vecs:
                    raise ValueError(f"gold doc id {did!r} missing from doc embeddings")

    def score_matrix(self) -> np.ndarray:
        """Cosine scores, one row per query id present in gold (id order)."""
        rows = [self.query_vecs.row(qid) for qid in self.query_ids()]
        return np.vstack(rows) @ self.doc_vecs.values.T

    def query_ids(self) -> list[str]:
        return sorted(self.gold)

    def gold_indices(self) -> dict[int, set[int]]:
        doc_pos = {did: i for i, did in enumerate(self.doc_vecs.ids)}
        return {
            qi: {doc_pos[did] for did in self.gold[qid]}
            for qi, qid in enumerate(self.query_ids())
        }


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def info_nce_from_cosines(
    pos_cos: float, neg_cos: Sequence[float], params: LossParams
) -> float:
    """Contrastive loss from precomputed cosine similarities.

    Computed as logsumexp over [positive, negatives] with the max logit
    subtracted first, so extreme temperatures cannot overflow.
    """
    logits = np.concatenate(([pos_cos], np.asarray(neg_cos, dtype=np.float64))) / params.tau
    m = float(np.max(logits))
    lse = m + float(np.log(np.sum(np.exp(logits - m))))
    return lse - logits[0]


def info_nce(
    q: Sequence[float] | np.ndarray,
    d_plus: Sequence[float] | np.ndarray,
    negatives: Sequence[Sequence[float]] | Sequence[np.ndarray],
    params: LossParams,
) -> float:
    """Loss for one query against its positive and a set of negatives."""
    pos = cosine(q, d_plus)
    negs = [cosine(q, d) for d in negatives]
    return info_nce_from_cosines(pos, negs, params)


def _check_gold(scores: np.ndarray, gold: Mapping[int, set[int]]) -> None:
    n_queries, n_docs = scores.shape
    for qi in range(n_queries):
        docs = gold.get(qi)
        if not docs:
            raise ValueError(f"query {qi} has no gold documents")
        for di in docs:
            if not 0 <= di < n_docs:
                raise ValueError(f"gold doc index {di} out of range for query {qi}")


def precision_at_1(scores: np.ndarray, gold: Mapping[int, set[int]]) -> float:
    """Fraction of queries whose single best document is gold."""
    scores = np.asarray(scores, dtype=np.float64)
    _check_gold(scores, gold)
    hits = sum(1 for qi in range(scores.shape[0]) if int(np.argmax(scores[qi])) in gold[qi])
    return hits / scores.shape[0]


def recall_at_k(scores: np.ndarray, gold: Mapping[int, set[int]], k: int) -> float:
    """Fraction of queries with at least one gold document in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    _check_gold(scores, gold)
    hits = 0
    for qi in range(scores.shape[0]):
        order = np.argsort(-scores[qi], kind="stable")  # stable keeps ties index-ascending
        if gold[qi] & set(int(d) for d in order[:k]):
            hits += 1
    return hits / scores.shape[0]


def mine_hard_negative(ranking: Sequence[str], positive: str, rank: int = 70) -> str:
    """Pick the hard negative at a 1-based rank in a best-first ranking.

    If the ranked id is the positive itself, take the next one; if the list
    is too short, take the last id that is not the positive.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if not ranking:
        raise ValueError("ranking is empty")
    if len(ranking) >= rank:
        if ranking[rank - 1] != positive:
            return ranking[rank - 1]
        if rank < len(ranking):
            return ranking[rank]
    for candidate in reversed(ranking):
        if candidate != positive:
            return candidate
    raise ValueError("ranking contains no candidate other than the positive")


def fit_linear_log(points: Sequence[tuple[float, float]]) -> dict[str, float]:
    """Least-squares fit of y = slope * log10(n) + intercept."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    n = np.asarray([p[0] for p in points], dtype=np.float64)
    y = np.asarray([p[1] for p in points], dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError("counts must be positive")
    x = np.log10(n)
    if np.unique(x).size < 2:
        raise ValueError("degenerate fit: all counts equal")

    x_mean, y_mean = float(x.mean()), float(y.mean())
    sxx = float(np.sum((x - x_mean) ** 2))
    sxy = float(np.sum((x - x_mean) * (y - y_mean)))
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean

    residuals = y - (slope * x + intercept)
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - y_mean) ** 2))
    # ss_tot at rounding-noise level means the data is constant: the fit is
    # perfect (least squares guarantees ss_res <= ss_tot).
    noise_floor = len(y) * (1e-12 * (1.0 + float(np.max(np.abs(y))))) ** 2
    if ss_tot <= noise_floor:
        r_squared = 1.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return {"slope": slope, "intercept": intercept, "r_squared": r_squared}
