"""Set prediction: iterated aggregation blocks with slot-normalized attention.

A fixed number of element slots compete to explain local features by
attention normalized over the slot axis, are updated by a residual MLP,
and are finally fused with the sample's global feature.  The same block
weights are used at every iteration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape as tc
from .similarity import EmbeddingSet


@dataclass
class SetPredictorConfig:
    k: int = 4            # slot count = output set cardinality
    t: int = 4            # aggregation iterations
    d: int = 64           # embedding dimension
    d_h: int = 64         # attention dimension
    use_positional_encoding: bool = False
    init_slots: str = "learnable"   # "learnable" | "random"
    add_global: bool = True
    residual_update: bool = True
    gelu_exact: bool = True
    ln_eps: float = 1e-6
    attn_renorm_eps: float = 1e-8

    def __post_init__(self):
        if min(self.k, self.t, self.d, self.d_h) < 1:
            raise ValueError("k, t, d, d_h must all be >= 1")
        if self.init_slots not in ("learnable", "random"):
            raise ValueError("init_slots must be 'learnable' or 'random'")


#: parameter names and shape builders, in checkpoint order
def param_shapes(cfg: SetPredictorConfig) -> dict[str, tuple[int, int]]:
    d, dh, k = cfg.d, cfg.d_h, cfg.k
    return {
        "slots0": (k, d),
        "w_q": (d, dh),
        "w_k": (d, dh),
        "w_v": (d, dh),
        "w_o": (dh, d),
        "mlp_w1": (d, d),
        "mlp_b1": (1, d),
        "mlp_w2": (d, d),
        "mlp_b2": (1, d),
        "ln_local_g": (1, d),
        "ln_local_b": (1, d),
        "ln_slots_g": (1, d),
        "ln_slots_b": (1, d),
        "ln_mlp_g": (1, d),
        "ln_mlp_b": (1, d),
        "ln_out_g": (1, d),
        "ln_out_b": (1, d),
        "ln_glob_g": (1, d),
        "ln_glob_b": (1, d),
    }


def init_params(cfg: SetPredictorConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Symmetric-uniform init scaled by 1/sqrt(fan_in).

    The MLP output layer starts at zero so the residual update is
    near-identity early on.  Layer-norm gains start at one.
    """
    params = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        if name.endswith("_g"):
            params[name] = np.ones((rows, cols))
        elif name.endswith("_b") or name == "mlp_w2":
            params[name] = np.zeros((rows, cols))
        elif name == "slots0":
            params[name] = rng.uniform(-1, 1, size=(rows, cols)) / np.sqrt(cols)
        else:
            params[name] = rng.uniform(-1, 1, size=(rows, cols)) / np.sqrt(rows)
    return params


@dataclass
class SampleFeatures:
    """Local features (N x D) and a global feature (1 x D) for one sample."""

    local: np.ndarray
    global_feat: np.ndarray

    def __post_init__(self):
        self.local = np.asarray(self.local, dtype=np.float64)
        self.global_feat = np.atleast_2d(np.asarray(self.global_feat, dtype=np.float64))
        if self.local.ndim != 2 or self.local.shape[0] < 1:
            raise ValueError("local features must be a non-empty N x D matrix")
        if self.global_feat.shape != (1, self.local.shape[1]):
            raise ValueError("global feature must be a 1 x D row")


@dataclass
class SlotState:
    """Slots after some number of iterations, with the last attention map."""

    slots: tc.Var          # K x D
    iteration: int
    attn: np.ndarray | None = None   # N x K, rows sum to 1


@dataclass
class PredictedSet:
    """Output of a full set-prediction forward pass."""

    embedding: tc.Var      # K x D fused set (the retrieval representation)
    slots: tc.Var          # K x D pre-fusion slots (diversity regularizer input)
    attn: np.ndarray       # N x K attention of the last iteration

    def as_set(self) -> EmbeddingSet:
        return EmbeddingSet(self.embedding.value.copy())


def sinusoidal_pe(n_positions: int, d: int) -> np.ndarray:
    """Interleaved sine/cosine positional encoding, wavelengths 10^4^(2i/d)."""
    if d % 2 != 0:
        raise ValueError("positional encoding requires an even dimension")
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((n_positions, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def _as_var(x) -> tc.Var:
    return x if isinstance(x, tc.Var) else tc.constant(x)


def agg_block(features: SampleFeatures, state: SlotState,
              params: dict[str, tc.Var], cfg: SetPredictorConfig) -> SlotState:
    """One competition-and-update iteration of the element slots."""
    local = _as_var(features.local)
    if cfg.use_positional_encoding:
        local_k = tc.add_const(
            local, sinusoidal_pe(local.value.shape[0], local.value.shape[1]))
    else:
        local_k = local
    eps = cfg.ln_eps
    ln_local_k = tc.layer_norm(local_k, params["ln_local_g"],
                               params["ln_local_b"], eps)
    ln_local_v = tc.layer_norm(local, params["ln_local_g"],
                               params["ln_local_b"], eps)
    ln_slots = tc.layer_norm(state.slots, params["ln_slots_g"],
                             params["ln_slots_b"], eps)

    q = tc.matmul(ln_slots, params["w_q"])          # K x Dh
    k = tc.matmul(ln_local_k, params["w_k"])        # N x Dh
    v = tc.matmul(ln_local_v, params["w_v"])        # N x Dh

    logits = tc.scale(tc.matmul(k, tc.transpose(q)), 1.0 / np.sqrt(cfg.d_h))
    attn = tc.softmax_over_axis(logits, "cols")     # N x K, rows sum to 1
    attn_hat = tc.normalize_columns(attn, cfg.attn_renorm_eps)

    update = tc.matmul(tc.matmul(tc.transpose(attn_hat), v), params["w_o"])
    if cfg.residual_update:
        mid = tc.add(update, state.slots)
    else:
        mid = update

    h = tc.layer_norm(mid, params["ln_mlp_g"], params["ln_mlp_b"], eps)
    h = tc.add_rowvec(tc.matmul(h, params["mlp_w1"]), params["mlp_b1"])
    h = tc.gelu(h, exact=cfg.gelu_exact)
    h = tc.add_rowvec(tc.matmul(h, params["mlp_w2"]), params["mlp_b2"])
    new_slots = tc.add(h, mid)

    out = SlotState(new_slots, state.iteration + 1, attn.value.copy())
    if not np.all(np.isfinite(new_slots.value)):
        raise FloatingPointError(
            f"non-finite slots after aggregation iteration {out.iteration}"
        )
    return out


def initial_slots(params: dict[str, tc.Var], cfg: SetPredictorConfig,
                  rng: np.random.Generator | None = None) -> tc.Var:
    if cfg.init_slots == "learnable":
        return params["slots0"]
    if rng is None:
        raise ValueError("random slot init requires an rng")
    return tc.constant(rng.standard_normal((cfg.k, cfg.d)) / np.sqrt(cfg.d))


def predict_set(features: SampleFeatures, params: dict[str, tc.Var],
                cfg: SetPredictorConfig,
                rng: np.random.Generator | None = None) -> PredictedSet:
    """Run T weight-shared aggregation blocks, then fuse the global feature."""
    state = SlotState(initial_slots(params, cfg, rng), 0)
    for _ in range(cfg.t):
        state = agg_block(features, state, params, cfg)
    fused = tc.layer_norm(state.slots, params["ln_out_g"], params["ln_out_b"],
                          cfg.ln_eps)
    if cfg.add_global:
        glob = tc.layer_norm(_as_var(features.global_feat),
                             params["ln_glob_g"], params["ln_glob_b"], cfg.ln_eps)
        fused = tc.add_rowvec(fused, glob)
    return PredictedSet(fused, state.slots, state.attn)


def predict_set_encoded(features: SampleFeatures, params: dict[str, tc.Var],
                        enc_params: dict[str, tc.Var],
                        cfg: SetPredictorConfig,
                        prefix: str,
                        rng: np.random.Generator | None = None) -> PredictedSet:
    """Predict a set from raw features after the trainable affine encoder."""
    from .data import encode_taped  # local import to avoid a cycle
    enc = encode_taped(features, enc_params, prefix)
    return predict_set(enc, params, cfg, rng)


# ---------------------------------------------------------------------------
# checkpoint blocks: "DIVP" magic, config JSON, named f32 tensor table
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DIVP"


def write_named_tensors(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_named_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode("utf-8")
        rows, cols = struct.unpack("<II", fh.read(8))
        payload = fh.read(rows * cols * 4)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
    return out
