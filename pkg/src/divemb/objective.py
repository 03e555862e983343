"""Training objective: mined triplet loss plus diversity and MMD regularizers.

The batch-level similarity matrix between all visual and all textual
sets is computed in one blocked pass (stacked elements, one big cosine
matrix, segmented reductions), so the objective adds only a handful of
tape nodes regardless of batch size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tape as tc
from .similarity import (EmbeddingSet, PairGrad, SimilarityConfig,
                         SimilarityKind)


@dataclass
class LossConfig:
    margin_delta: float = 0.1
    reg_weight: float = 0.01      # applied to both regularizers
    hardest_mining: bool = True
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)
    mmd_gamma: float = 0.5
    mmd_median_heuristic: bool = False

    def __post_init__(self):
        if self.margin_delta < 0 or self.reg_weight < 0:
            raise ValueError("margin_delta and reg_weight must be >= 0")


@dataclass
class Batch:
    """Visual and textual embedding sets plus the pairing table.

    ``cap_to_img[c]`` is the index of the image that caption ``c``
    describes; every image must own at least one caption.
    """

    visual_sets: list
    text_sets: list
    cap_to_img: list[int]

    def __post_init__(self):
        if len(self.cap_to_img) != len(self.text_sets):
            raise ValueError("cap_to_img must parallel text_sets")
        owned = set(self.cap_to_img)
        if owned - set(range(len(self.visual_sets))):
            raise ValueError("caption mapped to a missing image")
        if set(range(len(self.visual_sets))) - owned:
            raise ValueError("every image needs at least one caption")


def _segment_reduce(c: tc.Var, bi: int, bt: int, k: int, kind: str,
                    alpha: float = 16.0) -> tc.Var:
    """Reduce a (bi*k x bt*k) cosine matrix to a (bi x bt) score matrix.

    kind "lse": per-element LSE over the other set then mean over
    elements (one direction of smooth-Chamfer, scaled by 1/(2*alpha*k)).
    kind "max": hard-max counterpart scaled by 1/(2k).
    """
    if kind == "lse":
        red = tc.lse_over_axis(tc.reshape(tc.scale(c, alpha), bi * k * bt, k), "cols")
        scale = 1.0 / (2.0 * alpha * k)
    else:
        red = tc.max_over_axis(tc.reshape(c, bi * k * bt, k), "cols")
        scale = 1.0 / (2.0 * k)
    per_elem = tc.reshape(red, bi * k, bt)
    pool = np.kron(np.eye(bi), np.ones((1, k))) * scale
    return tc.matmul(tc.constant(pool), per_elem)


def batch_similarity(v_elems: tc.Var, t_elems: tc.Var, bi: int, bt: int,
                     k: int, sim: SimilarityConfig,
                     mp_scalars: tuple[tc.Var, tc.Var] | None = None) -> tc.Var:
    """(bi x bt) matrix of set similarities from stacked set elements.

    ``v_elems`` is the row-concatenation of all bi visual sets (bi*k x D)
    and ``t_elems`` likewise for captions.  All sets share cardinality k.
    For MP, ``mp_scalars`` may supply taped (a, b) so they can train.
    """
    u = tc.l2_normalize_rows(v_elems)
    w = tc.l2_normalize_rows(t_elems)
    c = tc.matmul(u, tc.transpose(w))            # (bi*k) x (bt*k)
    if sim.kind is SimilarityKind.SMOOTH_CHAMFER:
        left = _segment_reduce(c, bi, bt, k, "lse", sim.alpha)
        right = tc.transpose(
            _segment_reduce(tc.transpose(c), bt, bi, k, "lse", sim.alpha))
        return tc.add(left, right)
    if sim.kind is SimilarityKind.CHAMFER:
        left = _segment_reduce(c, bi, bt, k, "max")
        right = tc.transpose(_segment_reduce(tc.transpose(c), bt, bi, k, "max"))
        return tc.add(left, right)
    if sim.kind is SimilarityKind.MIL:
        best_t = tc.reshape(
            tc.max_over_axis(tc.reshape(c, bi * k * bt, k), "cols"), bi * k, bt)
        # best_t rows are ordered (image, element); the max over each
        # image's k rows is a reshape-and-reduce on the transposed matrix
        bt_t = tc.transpose(best_t)               # bt x (bi*k)
        return tc.transpose(tc.reshape(
            tc.max_over_axis(tc.reshape(bt_t, bt * bi, k), "cols"), bt, bi))
    if sim.kind is SimilarityKind.MP:
        if mp_scalars is not None:
            a, b = mp_scalars
            z = tc.sigmoid(tc.affine_scalar(c, a, b))
        else:
            z = tc.sigmoid(tc.add_scalar(tc.scale(c, sim.mp_a), sim.mp_b))
        pool_v = np.kron(np.eye(bi), np.ones((1, k)))
        pool_t = np.kron(np.eye(bt), np.ones((1, k)))
        s = tc.matmul(tc.matmul(tc.constant(pool_v), z),
                      tc.transpose(tc.constant(pool_t)))
        return tc.scale(s, 1.0 / (k * k)) if sim.mp_mean else s
    raise ValueError(f"unknown similarity kind: {sim.kind!r}")


def mined_triplet_terms(sim_values: np.ndarray, cap_to_img: list[int],
                        delta: float, hardest: bool):
    """Select triplet index structure from a detached similarity matrix.

    Returns (pair_img, pair_cap, neg_cap, neg_img) index arrays for the
    hardest-mining case, where mining excludes every caption of the
    anchor image on the image side and the caption's own image on the
    caption side.  Ties break toward the first index.
    """
    bi, bt = sim_values.shape
    cap_to_img = np.asarray(cap_to_img)
    pair_img = cap_to_img
    pair_cap = np.arange(bt)
    if not hardest:
        return pair_img, pair_cap, None, None
    neg_cap = np.empty(bt, dtype=np.intp)
    neg_img = np.empty(bt, dtype=np.intp)
    for p in range(bt):
        i = cap_to_img[p]
        row = sim_values[i].copy()
        row[cap_to_img == i] = -np.inf
        neg_cap[p] = int(np.argmax(row))
        col = sim_values[:, p].copy()
        col[i] = -np.inf
        neg_img[p] = int(np.argmax(col))
    return pair_img, pair_cap, neg_cap, neg_img


def triplet_loss_taped(sim: tc.Var, cap_to_img: list[int],
                       cfg: LossConfig) -> tc.Var:
    """Both directions of the mined triplet loss over a taped sim matrix."""
    bi, bt = sim.value.shape
    if bi < 2:
        warnings.warn("batch holds a single image: no negatives, triplet loss is 0")
        return tc.sum_all(tc.scale(sim, 0.0))
    pair_img, pair_cap, neg_cap, neg_img = mined_triplet_terms(
        sim.value, cap_to_img, cfg.margin_delta, cfg.hardest_mining)
    pos = tc.gather_pairs(sim, pair_img, pair_cap)
    if cfg.hardest_mining:
        neg_i = tc.gather_pairs(sim, pair_img, neg_cap)
        neg_c = tc.gather_pairs(sim, neg_img, pair_cap)
        img_side = tc.relu(tc.add_scalar(tc.sub(neg_i, pos), cfg.margin_delta))
        cap_side = tc.relu(tc.add_scalar(tc.sub(neg_c, pos), cfg.margin_delta))
        return tc.add(tc.sum_all(img_side), tc.sum_all(cap_side))
    # no mining: hinge against every valid negative
    cap_to_img_arr = np.asarray(cap_to_img)
    sel_rows = np.zeros((bt, bi))
    sel_rows[np.arange(bt), cap_to_img_arr] = 1.0
    per_pair = tc.matmul(tc.constant(sel_rows), sim)   # bt x bt (anchor rows)
    mask_img = (cap_to_img_arr[:, None] != cap_to_img_arr[None, :]).astype(float)
    img_side = tc.mul_elems(
        tc.relu(tc.add_scalar(tc.sub(per_pair, _bcast_col(pos, bt)),
                              cfg.margin_delta)), mask_img)
    per_cap = tc.transpose(sim)                         # bt x bi
    mask_cap = np.ones((bt, bi))
    mask_cap[np.arange(bt), cap_to_img_arr] = 0.0
    cap_side = tc.mul_elems(
        tc.relu(tc.add_scalar(tc.sub(per_cap, _bcast_col(pos, bi)),
                              cfg.margin_delta)), mask_cap)
    return tc.add(tc.sum_all(img_side), tc.sum_all(cap_side))


def _bcast_col(col: tc.Var, width: int) -> tc.Var:
    return tc.matmul(col, tc.constant(np.ones((1, width))))


def diversity_taped(slot_vars: list[tc.Var]) -> tc.Var:
    """Mean over samples of sum_{x != x'} exp(-2 ||x - x'||^2) over slots."""
    terms = []
    for slots in slot_vars:
        k = slots.value.shape[0]
        if k < 2:
            continue
        r = tc.sqnorm_rows(slots)
        d2 = tc.sub(tc.add_outer(r, tc.transpose(r)),
                    tc.scale(tc.matmul(slots, tc.transpose(slots)), 2.0))
        kernel = tc.exp(tc.scale(d2, -2.0))
        off_diag = 1.0 - np.eye(k)
        terms.append(tc.sum_all(tc.mul_elems(kernel, off_diag)))
    if not terms:
        return tc.constant([[0.0]])
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return tc.scale(total, 1.0 / len(slot_vars))


def _kernel_matrix(x: tc.Var, y: tc.Var, gamma: float) -> tc.Var:
    rx = tc.sqnorm_rows(x)
    ry = tc.sqnorm_rows(y)
    d2 = tc.sub(tc.add_outer(rx, tc.transpose(ry)),
                tc.scale(tc.matmul(x, tc.transpose(y)), 2.0))
    return tc.exp(tc.scale(d2, -gamma))


def mmd_gamma(x_vals: np.ndarray, y_vals: np.ndarray, cfg: LossConfig) -> float:
    if not cfg.mmd_median_heuristic:
        return cfg.mmd_gamma
    z = np.vstack([x_vals, y_vals])
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    med = np.median(d2[np.triu_indices(len(z), k=1)])
    return 1.0 / max(med, 1e-12)


def mmd_taped(x: tc.Var, y: tc.Var, gamma: float, unbiased: bool = True) -> tc.Var:
    """Gaussian-kernel MMD^2 between the pooled element rows of x and y."""
    n, m = x.value.shape[0], y.value.shape[0]
    kxx = _kernel_matrix(x, x, gamma)
    kyy = _kernel_matrix(y, y, gamma)
    kxy = _kernel_matrix(x, y, gamma)
    if unbiased and n > 1 and m > 1:
        off_x = 1.0 - np.eye(n)
        off_y = 1.0 - np.eye(m)
        xx = tc.scale(tc.sum_all(tc.mul_elems(kxx, off_x)), 1.0 / (n * (n - 1)))
        yy = tc.scale(tc.sum_all(tc.mul_elems(kyy, off_y)), 1.0 / (m * (m - 1)))
    else:
        xx = tc.scale(tc.sum_all(kxx), 1.0 / (n * n))
        yy = tc.scale(tc.sum_all(kyy), 1.0 / (m * m))
    xy = tc.scale(tc.sum_all(kxy), 2.0 / (n * m))
    return tc.relu(tc.sub(tc.add(xx, yy), xy))   # clamp tiny negatives at 0


@dataclass
class LossParts:
    total: tc.Var
    triplet: tc.Var
    diversity: tc.Var
    mmd: tc.Var
    sim: tc.Var


def total_loss_taped(v_elems: tc.Var, t_elems: tc.Var,
                     v_slot_vars: list[tc.Var], t_slot_vars: list[tc.Var],
                     cap_to_img: list[int], k: int, cfg: LossConfig,
                     mp_scalars=None) -> LossParts:
    bi = len(v_slot_vars)
    bt = len(t_slot_vars)
    sim = batch_similarity(v_elems, t_elems, bi, bt, k, cfg.sim, mp_scalars)
    tri = triplet_loss_taped(sim, cap_to_img, cfg)
    div = diversity_taped(v_slot_vars + t_slot_vars)
    gamma = mmd_gamma(v_elems.value, t_elems.value, cfg)
    mmd = mmd_taped(v_elems, t_elems, gamma)
    total = tri
    if cfg.reg_weight > 0:
        total = tc.add(total, tc.scale(tc.add(div, mmd), cfg.reg_weight))
    return LossParts(total, tri, div, mmd, sim)


# ---------------------------------------------------------------------------
# eager wrappers over fixed embedding sets (loss-level oracles and tests)
# ---------------------------------------------------------------------------

def _stack_batch(batch: Batch, t: tc.Tape):
    k = batch.visual_sets[0].k
    v_vars = [t.var(s.elems) for s in batch.visual_sets]
    t_vars = [t.var(s.elems) for s in batch.text_sets]
    return (tc.concat_rows(v_vars), tc.concat_rows(t_vars), v_vars, t_vars, k)


def triplet_loss(batch: Batch, cfg: LossConfig):
    """Mined triplet loss over fixed sets; returns value and set gradients."""
    t = tc.Tape()
    v_elems, t_elems, v_vars, t_vars, k = _stack_batch(batch, t)
    sim = batch_similarity(v_elems, t_elems, len(v_vars), len(t_vars), k, cfg.sim)
    loss = triplet_loss_taped(sim, batch.cap_to_img, cfg)
    t.backward(loss)
    grads = PairGrad([t.grad(v) for v in v_vars], [t.grad(c) for c in t_vars])
    return loss.item(), grads


def diversity_reg(slot_sets: list[np.ndarray]) -> float:
    """Batch-averaged slot diversity penalty on pre-fusion slots."""
    return diversity_taped([tc.constant(s) for s in slot_sets]).item()


def mmd_reg(batch: Batch, cfg: LossConfig | None = None) -> float:
    """Unbiased Gaussian MMD^2 between pooled elements of the modalities."""
    cfg = cfg or LossConfig()
    x = np.vstack([s.elems for s in batch.visual_sets])
    y = np.vstack([s.elems for s in batch.text_sets])
    gamma = mmd_gamma(x, y, cfg)
    return mmd_taped(tc.constant(x), tc.constant(y), gamma).item()


def total_loss(batch: Batch, slot_sets_v: list[np.ndarray],
               slot_sets_t: list[np.ndarray], cfg: LossConfig):
    """Full objective over fixed sets; returns value and set gradients."""
    t = tc.Tape()
    v_elems, t_elems, v_vars, t_vars, k = _stack_batch(batch, t)
    v_slots = [t.var(s) for s in slot_sets_v]
    t_slots = [t.var(s) for s in slot_sets_t]
    parts = total_loss_taped(v_elems, t_elems, v_slots, t_slots,
                             batch.cap_to_img, k, cfg)
    t.backward(parts.total)
    grads = PairGrad([t.grad(v) for v in v_vars], [t.grad(c) for c in t_vars])
    return parts.total.item(), grads, parts
