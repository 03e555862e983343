"""Set-to-set retrieval: exact scoring, Recall@K, RSUM, set diagnostics.

Scoring is brute-force and blocked: one matmul between all query
elements and all index elements, then segmented reductions per set.
Deterministic throughout (ties in ranking break toward the smaller id).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .similarity import EmbeddingSet, SimilarityConfig, SimilarityKind


@dataclass
class SetIndex:
    """Contiguous element storage for a corpus of embedding sets."""

    ids: np.ndarray        # unique sample ids, one per set
    elems: np.ndarray      # (sum K) x D, unit-normalized rows
    offsets: np.ndarray    # len(ids)+1 row offsets partitioning elems
    modality: str = ""

    @classmethod
    def build(cls, sets: list[EmbeddingSet], ids, modality: str = "") -> "SetIndex":
        if len(sets) != len(set(ids)):
            raise ValueError("ids must be unique and parallel to sets")
        ks = [s.k for s in sets]
        offsets = np.cumsum([0] + ks)
        elems = np.vstack([s.elems for s in sets]) if sets else np.zeros((0, 0))
        norms = np.linalg.norm(elems, axis=1, keepdims=True)
        elems = np.where(norms > 1e-12, elems / np.where(norms > 1e-12, norms, 1.0), 0.0)
        return cls(np.asarray(list(ids)), elems, offsets, modality)

    def __len__(self):
        return len(self.ids)

    def set_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def masked(self, keep_mask) -> "SetIndex":
        """Restrict every set to the kept element positions (reduced K)."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        if not keep_mask.any():
            raise ValueError("keep_mask removes every element")
        rows = []
        ks = []
        for i in range(len(self.ids)):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            if hi - lo != len(keep_mask):
                raise ValueError("keep_mask length must equal set cardinality")
            seg = self.elems[lo:hi][keep_mask]
            rows.append(seg)
            ks.append(len(seg))
        return SetIndex(self.ids, np.vstack(rows), np.cumsum([0] + ks), self.modality)


def _segment_lse(a: np.ndarray, offsets: np.ndarray, axis: int) -> np.ndarray:
    if axis == 0:
        return _segment_lse(a.T, offsets, 1).T
    starts = offsets[:-1]
    m = np.maximum.reduceat(a, starts, axis=1)
    widths = np.diff(offsets)
    rep = np.repeat(m, widths, axis=1)
    s = np.add.reduceat(np.exp(a - rep), starts, axis=1)
    return m + np.log(s)


def _segment_mean(a: np.ndarray, offsets: np.ndarray, axis: int) -> np.ndarray:
    if axis == 0:
        return _segment_mean(a.T, offsets, 1).T
    starts = offsets[:-1]
    return np.add.reduceat(a, starts, axis=1) / np.diff(offsets)


def score_matrix(a: SetIndex, b: SetIndex, cfg: SimilarityConfig) -> np.ndarray:
    """len(a) x len(b) matrix of set similarities."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    c = a.elems @ b.elems.T
    kind = cfg.kind
    if kind is SimilarityKind.SMOOTH_CHAMFER:
        al = cfg.alpha
        left = _segment_mean(_segment_lse(al * c, b.offsets, 1), a.offsets, 0)
        right = _segment_mean(_segment_lse(al * c, a.offsets, 0), b.offsets, 1)
        return (left + right) / (2.0 * al)
    if kind is SimilarityKind.CHAMFER:
        starts_b, starts_a = b.offsets[:-1], a.offsets[:-1]
        left = _segment_mean(np.maximum.reduceat(c, starts_b, axis=1), a.offsets, 0)
        right = _segment_mean(np.maximum.reduceat(c, starts_a, axis=0), b.offsets, 1)
        return (left + right) / 2.0
    if kind is SimilarityKind.MIL:
        m = np.maximum.reduceat(c, b.offsets[:-1], axis=1)
        return np.maximum.reduceat(m, a.offsets[:-1], axis=0)
    if kind is SimilarityKind.MP:
        z = 1.0 / (1.0 + np.exp(-(cfg.mp_a * c + cfg.mp_b)))
        s = np.add.reduceat(np.add.reduceat(z, b.offsets[:-1], axis=1),
                            a.offsets[:-1], axis=0)
        if cfg.mp_mean:
            s = s / np.outer(a.set_sizes(), b.set_sizes())
        return s
    raise ValueError(f"unknown similarity kind: {kind!r}")


def rank(query: EmbeddingSet, index: SetIndex, cfg: SimilarityConfig) -> list[int]:
    """Index ids ordered by descending similarity to the query set."""
    if len(index) == 0:
        return []
    q = SetIndex.build([query], [0])
    scores = score_matrix(q, index, cfg)[0]
    order = np.lexsort((index.ids, -scores))
    return [int(index.ids[i]) for i in order]


def rank_from_scores(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Row-wise descending-score ranking with ascending-id tie-break."""
    out = np.empty(scores.shape, dtype=np.int64)
    for r in range(scores.shape[0]):
        order = np.lexsort((ids, -scores[r]))
        out[r] = ids[order]
    return out


def recall_at_k(ranked: np.ndarray, matches: list[set], k: int) -> float:
    """Percentage of queries with at least one true match in the top k."""
    hits = 0
    for r, good in zip(ranked, matches):
        if good & set(r[:k].tolist()):
            hits += 1
    return 100.0 * hits / len(matches) if len(matches) else 0.0


@dataclass
class RetrievalReport:
    i2t_recall: dict[int, float]
    t2i_recall: dict[int, float]
    rsum: float
    circular_variance_visual: float
    circular_variance_text: float

    def to_dict(self) -> dict:
        return {
            "i2t_recall": {str(k): v for k, v in self.i2t_recall.items()},
            "t2i_recall": {str(k): v for k, v in self.t2i_recall.items()},
            "rsum": self.rsum,
            "circular_variance_visual": self.circular_variance_visual,
            "circular_variance_text": self.circular_variance_text,
        }


def rsum(report: RetrievalReport) -> float:
    return sum(report.i2t_recall.values()) + sum(report.t2i_recall.values())


def circular_variance(s: EmbeddingSet) -> float:
    """1 - || mean of unit-normalized elements ||, in [0, 1]."""
    norms = np.linalg.norm(s.elems, axis=1)
    keep = norms > 1e-12
    if not keep.all():
        warnings.warn("zero-norm elements excluded from circular variance")
    if not keep.any():
        return 0.0
    unit = s.elems[keep] / norms[keep, None]
    return float(1.0 - np.linalg.norm(unit.mean(axis=0)))


def mean_circular_variance(index: SetIndex) -> float:
    vals = []
    for i in range(len(index)):
        lo, hi = index.offsets[i], index.offsets[i + 1]
        vals.append(circular_variance(EmbeddingSet(index.elems[lo:hi])))
    return float(np.mean(vals)) if vals else 0.0


def evaluate_retrieval(v_index: SetIndex, t_index: SetIndex,
                       match_table: dict[int, list[int]],
                       cfg: SimilarityConfig,
                       recall_ks=(1, 5, 10)) -> RetrievalReport:
    """Full both-direction report against the exact ground-truth table."""
    scores = score_matrix(v_index, t_index, cfg)
    i2t_ranked = rank_from_scores(scores, t_index.ids)
    t2i_ranked = rank_from_scores(scores.T, v_index.ids)
    cap_to_img = {c: img for img, caps in match_table.items() for c in caps}
    i2t_matches = [set(match_table[int(i)]) for i in v_index.ids]
    t2i_matches = [{cap_to_img[int(c)]} for c in t_index.ids]
    i2t = {k: recall_at_k(i2t_ranked, i2t_matches, k) for k in recall_ks}
    t2i = {k: recall_at_k(t2i_ranked, t2i_matches, k) for k in recall_ks}
    report = RetrievalReport(
        i2t, t2i, 0.0,
        mean_circular_variance(v_index), mean_circular_variance(t_index))
    report.rsum = rsum(report)
    return report


def slot_ablation_eval(v_index: SetIndex, t_index: SetIndex,
                       match_table: dict[int, list[int]],
                       cfg: SimilarityConfig,
                       visual_keep=None, text_keep=None) -> RetrievalReport:
    """Evaluate with only the kept element positions of each modality."""
    if visual_keep is not None:
        v_index = v_index.masked(visual_keep)
    if text_keep is not None:
        t_index = t_index.masked(text_keep)
    return evaluate_retrieval(v_index, t_index, match_table, cfg)


def ensemble_scores(scores_a: np.ndarray, scores_b: np.ndarray) -> np.ndarray:
    """Average the similarity scores of two models over the same universe."""
    if scores_a.shape != scores_b.shape:
        raise ValueError("score matrices must share the query/index universe")
    return 0.5 * (scores_a + scores_b)


def evaluate_from_scores(scores: np.ndarray, v_index: SetIndex,
                         t_index: SetIndex,
                         match_table: dict[int, list[int]],
                         recall_ks=(1, 5, 10)) -> RetrievalReport:
    """Report from a precomputed score matrix (ensembling path)."""
    i2t_ranked = rank_from_scores(scores, t_index.ids)
    t2i_ranked = rank_from_scores(scores.T, v_index.ids)
    cap_to_img = {c: img for img, caps in match_table.items() for c in caps}
    i2t_matches = [set(match_table[int(i)]) for i in v_index.ids]
    t2i_matches = [{cap_to_img[int(c)]} for c in t_index.ids]
    i2t = {k: recall_at_k(i2t_ranked, i2t_matches, k) for k in recall_ks}
    t2i = {k: recall_at_k(t2i_ranked, t2i_matches, k) for k in recall_ks}
    report = RetrievalReport(
        i2t, t2i, 0.0,
        mean_circular_variance(v_index), mean_circular_variance(t_index))
    report.rsum = rsum(report)
    return report
