"""Optimization loop: AdamW, cosine annealing, diagnostics, checkpoints.

One training step builds a fresh tape, runs both modalities' predictors
over a batch of images and all their captions, assembles the objective,
backprops, and applies an AdamW update.  Everything is seeded and
single-ordered, so a (config, seed) pair reproduces bit-identical
parameters.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tape as tc
from .data import (Corpus, caption_features, encoder_param_shapes,
                   image_features, init_encoder_params)
from .evaluate import SetIndex, evaluate_retrieval
from .objective import LossConfig, total_loss_taped
from .predictor import (CHECKPOINT_MAGIC, SetPredictorConfig, init_params,
                        predict_set, read_named_tensors, write_named_tensors)
from .similarity import EmbeddingSet, SimilarityKind
from .data import encode_taped


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_images: int = 32
    lr: float = 3e-3
    lr_schedule: str = "cosine"        # "cosine" | "step"
    step_decay: float = 0.1
    step_every: int = 10               # epochs, for the "step" schedule
    weight_decay: float = 1e-4
    seed: int = 0
    predictor_lr_scale: float = 1.0    # extra multiplier for predictor params
    hardest_mining_warmup: int = 0     # epochs trained without mining
    val_fraction: float = 0.1
    eval_every: int = 1                # epochs between validation passes

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_images < 2:
            raise ValueError("batch_images must be >= 2")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError("lr_schedule must be 'cosine' or 'step'")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               lr_scales: dict[str, float] | None = None) -> None:
    """In-place bias-corrected AdamW update with decoupled decay."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        scale = lr_scales.get(name, 1.0) if lr_scales else 1.0
        lr_t = lr * scale
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay > 0:
            params[name] -= lr_t * weight_decay * params[name]


@dataclass
class EpochMetrics:
    epoch: int
    l_tri: float
    l_div: float
    l_mmd: float
    circ_var_visual: float
    circ_var_text: float
    untrained_slot_fraction: float
    val_rsum: float

    CSV_HEADER = ("epoch,l_tri,l_div,l_mmd,circ_var_visual,circ_var_text,"
                  "untrained_slot_fraction,val_rsum")

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.l_tri:.6f},{self.l_div:.6f},"
                f"{self.l_mmd:.6f},{self.circ_var_visual:.6f},"
                f"{self.circ_var_text:.6f},{self.untrained_slot_fraction:.6f},"
                f"{self.val_rsum:.4f}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]       # best-validation snapshot
    final_params: dict[str, np.ndarray]
    metrics: list[EpochMetrics]
    best_val_rsum: float
    aborted: bool = False


MODALITY_PREFIXES = ("v", "t")


def init_model_params(pred_cfg: SetPredictorConfig, d_raw: int,
                      loss_cfg: LossConfig, seed: int) -> dict[str, np.ndarray]:
    """Two predictor instances, the encoders, and MP's scalars if needed."""
    rng = np.random.default_rng(seed)
    params = {}
    for prefix in MODALITY_PREFIXES:
        for name, arr in init_params(pred_cfg, rng).items():
            params[f"{prefix}.{name}"] = arr
    params.update(init_encoder_params(d_raw, pred_cfg.d, rng))
    if loss_cfg.sim.kind is SimilarityKind.MP:
        params["mp_a"] = np.array([[loss_cfg.sim.mp_a]])
        params["mp_b"] = np.array([[loss_cfg.sim.mp_b]])
    return params


def _split(corpus: Corpus, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(corpus.samples))
    n_val = max(1, int(round(cfg.val_fraction * len(corpus.samples))))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(corpus.samples) if i not in val_idx]
    val = [s for i, s in enumerate(corpus.samples) if i in val_idx]
    return train, val


def _forward_sample(feats, prefix, param_vars, pred_cfg, slot_rng):
    enc_prefix = "vis" if prefix == "v" else "txt"
    pp = {name.split(".", 1)[1]: var for name, var in param_vars.items()
          if name.startswith(prefix + ".")}
    enc = encode_taped(feats, param_vars, enc_prefix)
    return predict_set(enc, pp, pred_cfg, slot_rng)


def forward_samples(samples, param_vars, pred_cfg, slot_rng=None):
    """Predict fused sets and pre-fusion slots for images and captions."""
    v_preds, t_preds, cap_to_img = [], [], []
    for b, sample in enumerate(samples):
        v_preds.append(_forward_sample(image_features(sample), "v",
                                       param_vars, pred_cfg, slot_rng))
        for cap in sample.captions:
            t_preds.append(_forward_sample(caption_features(cap), "t",
                                           param_vars, pred_cfg, slot_rng))
            cap_to_img.append(b)
    return v_preds, t_preds, cap_to_img


def build_indexes(samples, params, pred_cfg, slot_rng=None):
    """Eager (tape-free) forward over a sample list, for evaluation.

    With random initial slots, evaluation draws them from a fixed seed so
    repeated evaluations of the same checkpoint are identical.
    """
    if slot_rng is None and pred_cfg.init_slots == "random":
        slot_rng = np.random.default_rng(12345)
    param_vars = {k: tc.constant(v) for k, v in params.items()}
    v_preds, t_preds, _ = forward_samples(samples, param_vars, pred_cfg, slot_rng)
    v_sets = [p.as_set() for p in v_preds]
    t_sets = [p.as_set() for p in t_preds]
    v_ids = [s.image_id for s in samples]
    t_ids = [c.caption_id for s in samples for c in s.captions]
    return (SetIndex.build(v_sets, v_ids, "visual"),
            SetIndex.build(t_sets, t_ids, "text"),
            {s.image_id: [c.caption_id for c in s.captions] for s in samples})


def _epoch_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cosine_lr(step, total_steps, cfg.lr)
    epoch = step * cfg.epochs // max(total_steps, 1)
    return cfg.lr * (cfg.step_decay ** (epoch // cfg.step_every))


def train(corpus: Corpus, train_cfg: TrainConfig, pred_cfg: SetPredictorConfig,
          loss_cfg: LossConfig, log_fn=None) -> TrainResult:
    train_samples, val_samples = _split(corpus, train_cfg)
    params = init_model_params(pred_cfg, corpus.config.d_raw, loss_cfg,
                               train_cfg.seed)
    opt = OptimState.zeros_like(params)
    batch_rng = np.random.default_rng(train_cfg.seed + 7)
    slot_rng = (np.random.default_rng(train_cfg.seed + 13)
                if pred_cfg.init_slots == "random" else None)
    steps_per_epoch = max(1, len(train_samples) // train_cfg.batch_images)
    total_steps = steps_per_epoch * train_cfg.epochs
    lr_scales = {}
    if train_cfg.predictor_lr_scale != 1.0:
        for name in params:
            if name.startswith(("v.", "t.")):
                lr_scales[name] = train_cfg.predictor_lr_scale

    metrics: list[EpochMetrics] = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_rsum = -1.0
    last_good = best_params
    aborted = False
    step = 0

    for epoch in range(train_cfg.epochs):
        order = batch_rng.permutation(len(train_samples))
        mining = epoch >= train_cfg.hardest_mining_warmup and loss_cfg.hardest_mining
        epoch_loss_cfg = loss_cfg if mining == loss_cfg.hardest_mining else \
            LossConfig(loss_cfg.margin_delta, loss_cfg.reg_weight, mining,
                       loss_cfg.sim, loss_cfg.mmd_gamma,
                       loss_cfg.mmd_median_heuristic)
        sums = np.zeros(3)
        cvar = np.zeros(2)
        n_batches = 0
        grad_norm_acc = []   # per (sample, slot) triplet-path gradient norms
        for b0 in range(steps_per_epoch):
            idx = order[b0 * train_cfg.batch_images:(b0 + 1) * train_cfg.batch_images]
            batch = [train_samples[i] for i in idx]
            t = tc.Tape()
            param_vars = {k: t.var(v) for k, v in params.items()}
            v_preds, t_preds, cap_to_img = forward_samples(
                batch, param_vars, pred_cfg, slot_rng)
            v_elems = tc.concat_rows([p.embedding for p in v_preds])
            t_elems = tc.concat_rows([p.embedding for p in t_preds])
            mp_scalars = None
            if "mp_a" in params:
                mp_scalars = (param_vars["mp_a"], param_vars["mp_b"])
            parts = total_loss_taped(
                v_elems, t_elems,
                [p.slots for p in v_preds], [p.slots for p in t_preds],
                cap_to_img, pred_cfg.k, epoch_loss_cfg, mp_scalars)
            if not np.isfinite(parts.total.value).all():
                aborted = True
                break
            # triplet-path element gradients feed the sparse-supervision counter
            t.backward(parts.triplet)
            for p in v_preds + t_preds:
                g = t.grad(p.embedding)
                grad_norm_acc.extend(np.linalg.norm(g, axis=1).tolist())
            t.backward(parts.total)
            grads = {k: t.grad(v) for k, v in param_vars.items()}
            if not all(np.isfinite(g).all() for g in grads.values()):
                aborted = True
                break
            lr_t = _epoch_lr(train_cfg, step, total_steps)
            adamw_step(params, grads, opt, lr_t, train_cfg.weight_decay,
                       lr_scales=lr_scales or None)
            step += 1
            sums += (parts.triplet.item(), parts.diversity.item(),
                     parts.mmd.item())
            cvar += (_mean_cvar([p.embedding.value for p in v_preds]),
                     _mean_cvar([p.embedding.value for p in t_preds]))
            n_batches += 1
        if aborted:
            params = last_good
            break
        last_good = {k: v.copy() for k, v in params.items()}
        untrained = (float(np.mean(np.asarray(grad_norm_acc) < 1e-9))
                     if grad_norm_acc else 0.0)
        val_rsum = 0.0
        if val_samples and (epoch % train_cfg.eval_every == 0
                            or epoch == train_cfg.epochs - 1):
            vi, ti, table = build_indexes(val_samples, params, pred_cfg)
            val_rsum = evaluate_retrieval(vi, ti, table, loss_cfg.sim).rsum
            if val_rsum > best_rsum:
                best_rsum = val_rsum
                best_params = {k: v.copy() for k, v in params.items()}
        m = EpochMetrics(epoch, *(sums / max(n_batches, 1)),
                         *(cvar / max(n_batches, 1)), untrained, val_rsum)
        metrics.append(m)
        if log_fn:
            log_fn(m)
    if best_rsum < 0:
        best_params = {k: v.copy() for k, v in params.items()}
    return TrainResult(best_params, params, metrics, max(best_rsum, 0.0), aborted)


def _mean_cvar(elem_list) -> float:
    from .evaluate import circular_variance
    return float(np.mean([circular_variance(EmbeddingSet(e)) for e in elem_list]))


# ---------------------------------------------------------------------------
# checkpoint: "DIVP" magic, config JSON block, named tensor tables
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], config_echo: dict,
                    opt: OptimState | None = None) -> None:
    raw = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        write_named_tensors(fh, params)
        if opt is not None:
            fh.write(b"OPT1")
            write_named_tensors(fh, opt.m)
            write_named_tensors(fh, opt.v)
            fh.write(struct.pack("<I", opt.step))
        else:
            fh.write(b"OPT0")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        config_echo = json.loads(fh.read(hlen).decode("utf-8"))
        params = read_named_tensors(fh)
        tag = fh.read(4)
        opt = None
        if tag == b"OPT1":
            m = read_named_tensors(fh)
            v = read_named_tensors(fh)
            (step,) = struct.unpack("<I", fh.read(4))
            opt = OptimState(m, v, step)
    return params, config_echo, opt
