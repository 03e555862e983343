"""Set similarity functions over embedding sets.

Four scoring rules between two sets of embedding vectors, all built on
cosine similarity between elements:

* smooth-Chamfer: bidirectional soft assignment via scaled log-sum-exp,
  converging to Chamfer as the scale grows.
* Chamfer: bidirectional average of each element's best match.
* MIL: the single best cross-set pair.
* MP: sum of sigmoid-transformed affine cosine similarities over all
  pairs (match probability).

The smooth-Chamfer gradient is also available in closed form so it can
be cross-checked against the tape and finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tape as tc


class SimilarityKind(str, Enum):
    SMOOTH_CHAMFER = "sc"
    CHAMFER = "chamfer"
    MIL = "mil"
    MP = "mp"


@dataclass
class SimilarityConfig:
    kind: SimilarityKind = SimilarityKind.SMOOTH_CHAMFER
    alpha: float = 16.0
    mp_a: float = 1.0
    mp_b: float = 0.0
    mp_mean: bool = False  # mean over pairs instead of the plain sum

    def __post_init__(self):
        self.kind = SimilarityKind(self.kind)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class EmbeddingSet:
    """K x D matrix of set elements, stored unnormalized.

    Cosine normalization happens inside scoring, so elements may have
    arbitrary positive scale without affecting any similarity value.
    """

    elems: np.ndarray

    def __post_init__(self):
        self.elems = np.asarray(self.elems, dtype=np.float64)
        if self.elems.ndim != 2 or self.elems.shape[0] < 1:
            raise ValueError("EmbeddingSet requires a K x D matrix with K >= 1")

    @property
    def k(self) -> int:
        return self.elems.shape[0]

    @property
    def dim(self) -> int:
        return self.elems.shape[1]


@dataclass
class PairGrad:
    """Gradients of a scalar similarity w.r.t. the raw set elements."""

    d_s1: np.ndarray
    d_s2: np.ndarray


def _normalize_rows(x: np.ndarray, eps: float = 1e-12):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    safe = n > eps
    denom = np.where(safe, n, 1.0)
    return np.where(safe, x / denom, 0.0), denom, safe


def cosine_matrix(s1: EmbeddingSet, s2: EmbeddingSet) -> np.ndarray:
    """K1 x K2 matrix of cosine similarities between set elements.

    Zero-norm elements act as zero vectors (cosine 0 against anything).
    """
    if s1.dim != s2.dim:
        raise ValueError(f"dimension mismatch: {s1.dim} vs {s2.dim}")
    u, _, _ = _normalize_rows(s1.elems)
    v, _, _ = _normalize_rows(s2.elems)
    return u @ v.T


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def smooth_chamfer(s1: EmbeddingSet, s2: EmbeddingSet,
                   cfg: SimilarityConfig | None = None) -> float:
    """Scaled-LSE soft assignment in both directions, averaged."""
    cfg = cfg or SimilarityConfig()
    a = cfg.alpha
    c = cosine_matrix(s1, s2)
    k1, k2 = c.shape
    left = _lse(a * c, axis=1).sum() / (2.0 * a * k1)
    right = _lse(a * c, axis=0).sum() / (2.0 * a * k2)
    return float(left + right)


def chamfer(s1: EmbeddingSet, s2: EmbeddingSet) -> float:
    """Best-match average in both directions (hard-max counterpart)."""
    c = cosine_matrix(s1, s2)
    k1, k2 = c.shape
    return float(c.max(axis=1).sum() / (2.0 * k1) + c.max(axis=0).sum() / (2.0 * k2))


def mil(s1: EmbeddingSet, s2: EmbeddingSet) -> float:
    """Similarity of the single closest cross-set pair."""
    return float(cosine_matrix(s1, s2).max())


def mp(s1: EmbeddingSet, s2: EmbeddingSet, cfg: SimilarityConfig) -> float:
    """Match probability: sigmoid-transformed cosine summed over pairs."""
    c = cosine_matrix(s1, s2)
    vals = 1.0 / (1.0 + np.exp(-(cfg.mp_a * c + cfg.mp_b)))
    return float(vals.mean() if cfg.mp_mean else vals.sum())


def similarity(s1: EmbeddingSet, s2: EmbeddingSet, cfg: SimilarityConfig) -> float:
    if cfg.kind is SimilarityKind.SMOOTH_CHAMFER:
        return smooth_chamfer(s1, s2, cfg)
    if cfg.kind is SimilarityKind.CHAMFER:
        return chamfer(s1, s2)
    if cfg.kind is SimilarityKind.MIL:
        return mil(s1, s2)
    if cfg.kind is SimilarityKind.MP:
        return mp(s1, s2, cfg)
    raise ValueError(f"unknown similarity kind: {cfg.kind!r}")


def smooth_chamfer_dc(s1: EmbeddingSet, s2: EmbeddingSet,
                      cfg: SimilarityConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Value plus the closed-form gradient w.r.t. the cosine matrix.

    The (i, j) entry of the gradient is the sum of two softmax weights:
    the relative similarity of j among s2 for fixed i (scaled by
    1/(2 K1)) and of i among s1 for fixed j (scaled by 1/(2 K2)).  Every
    entry is strictly positive.
    """
    a = cfg.alpha
    c = cosine_matrix(s1, s2)
    k1, k2 = c.shape
    ac = a * c
    e_row = np.exp(ac - ac.max(axis=1, keepdims=True))
    soft_row = e_row / e_row.sum(axis=1, keepdims=True)
    e_col = np.exp(ac - ac.max(axis=0, keepdims=True))
    soft_col = e_col / e_col.sum(axis=0, keepdims=True)
    dc = soft_row / (2.0 * k1) + soft_col / (2.0 * k2)
    value = smooth_chamfer(s1, s2, cfg)
    return value, dc, c


def smooth_chamfer_grad(s1: EmbeddingSet, s2: EmbeddingSet,
                        cfg: SimilarityConfig | None = None) -> tuple[float, PairGrad]:
    """Smooth-Chamfer value and gradients w.r.t. the raw elements.

    Chains the closed-form cosine-level gradient through the cosine
    derivative.  Zero-norm elements receive a zero gradient, matching
    their zero-vector treatment in :func:`cosine_matrix`.
    """
    cfg = cfg or SimilarityConfig()
    value, dc, c = smooth_chamfer_dc(s1, s2, cfg)
    u, n1, safe1 = _normalize_rows(s1.elems)
    v, n2, safe2 = _normalize_rows(s2.elems)
    # d c_ij / d x_i = (v_j - c_ij u_i) / ||x_i||
    d_s1 = (dc @ v - (dc * c).sum(axis=1, keepdims=True) * u) / n1
    d_s2 = (dc.T @ u - (dc * c).sum(axis=0)[:, None] * v) / n2
    d_s1 = np.where(safe1, d_s1, 0.0)
    d_s2 = np.where(safe2, d_s2, 0.0)
    return value, PairGrad(d_s1, d_s2)


def smooth_chamfer_taped(s1: tc.Var, s2: tc.Var, alpha: float) -> tc.Var:
    """Smooth-Chamfer between two taped K x D element matrices.

    The tape route of the dual-route gradient check; also the training
    path when scoring individual set pairs.
    """
    u = tc.l2_normalize_rows(s1)
    v = tc.l2_normalize_rows(s2)
    c = tc.scale(tc.matmul(u, tc.transpose(v)), alpha)
    k1 = s1.value.shape[0]
    k2 = s2.value.shape[0]
    left = tc.scale(tc.sum_all(tc.lse_over_axis(c, "cols")), 1.0 / (2.0 * alpha * k1))
    right = tc.scale(tc.sum_all(tc.lse_over_axis(c, "rows")), 1.0 / (2.0 * alpha * k2))
    return tc.add(left, right)


# ---------------------------------------------------------------------------
# per-pair arithmetic cost, multiply-accumulate convention
# ---------------------------------------------------------------------------

def op_count(kind: SimilarityKind, k1: int, k2: int, d: int) -> int:
    """Analytic per-pair operation count for one similarity evaluation.

    Convention: one multiply-accumulate counts as one op (so the K1*K2
    cosine dot products cost K1*K2*D), element normalization is charged
    to index construction, and each transcendental call (exp, log,
    sigmoid) counts as one op.
    """
    dots = k1 * k2 * d
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.SMOOTH_CHAMFER:
        # scale + exp + accumulate per pair in both directions, then a
        # log and a divide per slice
        return dots + 4 * k1 * k2 + 2 * (k1 + k2)
    if kind is SimilarityKind.CHAMFER:
        return dots + 2 * k1 * k2 + (k1 + k2)
    if kind is SimilarityKind.MIL:
        return dots + k1 * k2
    if kind is SimilarityKind.MP:
        # affine transform + sigmoid + accumulate per pair
        return dots + 3 * k1 * k2
    raise ValueError(f"unknown similarity kind: {kind!r}")


# ---------------------------------------------------------------------------
# dumps: "DIVS" magic, u32 K, u32 D, f32 payload; corpus = count + sets + ids
# ---------------------------------------------------------------------------

SET_MAGIC = b"DIVS"


def write_set(fh, s: EmbeddingSet) -> None:
    arr = np.ascontiguousarray(s.elems, dtype="<f4")
    fh.write(SET_MAGIC)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(arr.tobytes())


def read_set(fh) -> EmbeddingSet:
    magic = fh.read(4)
    if magic != SET_MAGIC:
        raise ValueError(f"bad set magic: {magic!r}")
    k, d = struct.unpack("<II", fh.read(8))
    payload = fh.read(k * d * 4)
    if len(payload) != k * d * 4:
        raise ValueError("truncated set payload")
    return EmbeddingSet(np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(k, d))


def write_set_corpus(fh, sets, ids) -> None:
    """u32 count, concatenated sets, then a parallel u32 id table."""
    if len(sets) != len(ids):
        raise ValueError("sets and ids must be parallel")
    fh.write(struct.pack("<I", len(sets)))
    for s in sets:
        write_set(fh, s)
    for i in ids:
        fh.write(struct.pack("<I", int(i)))


def read_set_corpus(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    sets = [read_set(fh) for _ in range(count)]
    ids = list(struct.unpack(f"<{count}I", fh.read(4 * count))) if count else []
    return sets, ids
