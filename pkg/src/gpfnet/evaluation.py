"""Query/gallery retrieval evaluation with cosine similarity, CMC@k and mAP.

Protocol per query:

* the query record itself (matched by ``key``) never appears in its ranking;
* when both query and gallery item carry a camera id, gallery items sharing
  the query's identity *and* camera are dropped;
* the rest is sorted by descending cosine similarity, ties by gallery index.

AP is the mean of ``i / r_i`` over the relevant items, ``r_i`` being the
1-based rank of the i-th relevant hit. Queries with an empty admissible
gallery or without any relevant item are skipped and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_KS = (1, 5, 10)


@dataclass
class EvalItem:
    feature: np.ndarray
    label: int
    camera: int | None = None
    key: str | None = None  # record id, used for self-exclusion


@dataclass
class RankingResult:
    order: np.ndarray  # admissible gallery indices, best first
    scores: np.ndarray  # similarities aligned with ``order``
    matches: np.ndarray  # bool, gallery label == query label

    @property
    def num_relevant(self) -> int:
        return int(self.matches.sum())


@dataclass
class EvalReport:
    map: float
    cmc: dict[int, float]
    num_queries: int
    num_skipped: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(feats: np.ndarray) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero feature vector cannot be ranked by cosine similarity")
    if not np.isfinite(feats).all():
        raise ValueError("non-finite feature vector")
    return feats / norms


def _admissible(q: EvalItem, gallery: Sequence[EvalItem]) -> np.ndarray:
    keep = np.ones(len(gallery), dtype=bool)
    for j, g in enumerate(gallery):
        if q.key is not None and g.key == q.key:
            keep[j] = False
        elif (
            q.camera is not None
            and g.camera is not None
            and g.camera == q.camera
            and g.label == q.label
        ):
            keep[j] = False
    return keep


def _rank_row(sims: np.ndarray, keep: np.ndarray, q_label, g_labels: np.ndarray) -> RankingResult:
    idx = np.flatnonzero(keep)
    # stable sort on negated scores keeps ascending index among exact ties
    order = idx[np.argsort(-sims[idx], kind="stable")]
    return RankingResult(order, sims[order], g_labels[order] == q_label)


def rank_gallery(query: EvalItem, gallery: Sequence[EvalItem]) -> RankingResult:
    """Admissible gallery indices for one query, most similar first."""
    feats = _unit_rows([g.feature for g in gallery]) if gallery else np.zeros((0, 1))
    q = _unit_rows(query.feature)[0]
    sims = feats @ q if len(gallery) else np.zeros(0)
    labels = np.array([g.label for g in gallery])
    return _rank_row(sims, _admissible(query, gallery), query.label, labels)


def rank_all(queries: Sequence[EvalItem], gallery: Sequence[EvalItem]) -> list[RankingResult]:
    if not gallery:
        return [RankingResult(np.zeros(0, int), np.zeros(0), np.zeros(0, bool)) for _ in queries]
    g_feats = _unit_rows([g.feature for g in gallery])
    q_feats = _unit_rows([q.feature for q in queries]) if queries else np.zeros((0, g_feats.shape[1]))
    g_labels = np.array([g.label for g in gallery])
    sims = q_feats @ g_feats.T
    return [
        _rank_row(sims[i], _admissible(q, gallery), q.label, g_labels)
        for i, q in enumerate(queries)
    ]


def compute_cmc(rankings: Sequence[RankingResult], ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries whose first relevant hit is within the top ``k``.

    Rankings without any relevant item are ignored.
    """
    firsts = [int(np.argmax(r.matches)) + 1 for r in rankings if r.matches.any()]
    if not firsts:
        return {int(k): 0.0 for k in ks}
    firsts_arr = np.array(firsts)
    return {int(k): float(np.mean(firsts_arr <= k)) for k in ks}


def average_precision(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches) + 1
    if hits.size == 0:
        raise ValueError("no relevant items")
    return float(np.mean(np.arange(1, hits.size + 1) / hits))


def compute_map(rankings: Sequence[RankingResult]) -> float:
    aps = [average_precision(r.matches) for r in rankings if r.matches.any()]
    return float(np.mean(aps)) if aps else 0.0


def evaluate_items(
    queries: Sequence[EvalItem],
    gallery: Sequence[EvalItem],
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    rankings = rank_all(queries, gallery)
    usable = [r for r in rankings if r.order.size and r.matches.any()]
    return EvalReport(
        map=compute_map(usable),
        cmc=compute_cmc(usable, ks),
        num_queries=len(usable),
        num_skipped=len(rankings) - len(usable),
    )


def evaluate_features(
    q_feats,
    q_labels,
    g_feats,
    g_labels,
    q_cams=None,
    g_cams=None,
    q_keys=None,
    g_keys=None,
    ks: Sequence[int] = DEFAULT_KS,
) -> EvalReport:
    """Array front end to :func:`evaluate_items`."""

    def items(feats, labels, cams, keys):
        n = len(labels)
        cams = [None] * n if cams is None else cams
        keys = [None] * n if keys is None else keys
        return [EvalItem(np.asarray(f), int(lab), c, k) for f, lab, c, k in zip(feats, labels, cams, keys)]

    return evaluate_items(
        items(q_feats, q_labels, q_cams, q_keys), items(g_feats, g_labels, g_cams, g_keys), ks
    )


def evaluate(model, query_set, gallery_set, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    """Embed both datasets with ``model`` and score query-vs-gallery retrieval."""
    q = model.embed(query_set.images(), query_set.tokens())
    g = q if gallery_set is query_set else model.embed(gallery_set.images(), gallery_set.tokens())
    return evaluate_features(
        q, query_set.labels, g, gallery_set.labels,
        query_set.cameras, gallery_set.cameras, query_set.ids, gallery_set.ids, ks,
    )
