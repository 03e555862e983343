"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-10 train small models on the synthetic corpus; results are cached
per (arm, seed) so each configuration is trained exactly once per session.
"""

import json
import time

import numpy as np
import pytest

import divemb.tape as tc
from divemb.cli import main as cli_main
from divemb.data import CorpusConfig, generate_corpus
from divemb.gradcheck import numerical_grad, rel_error
from divemb.objective import Batch, LossConfig, total_loss, total_loss_taped
from divemb.predictor import (SampleFeatures, SetPredictorConfig, init_params,
                              predict_set)
from divemb.similarity import (EmbeddingSet, SimilarityConfig, chamfer, mil,
                               op_count, similarity, smooth_chamfer,
                               smooth_chamfer_grad, smooth_chamfer_taped,
                               SimilarityKind)
from divemb.trainer import TrainConfig, train

SEEDS = (0, 1, 2)

# Two benchmark corpora for the trend criteria.  "ambiguous": each image
# carries a small identity component shared with its captions, which keeps
# ground truth learnable and separates the soft from the hard matchers.
# "crowded": many concepts in a low-dimensional raw space with no identity
# component, where a single mean vector blurs neighboring concepts and the
# value of predicting a set of elements (K>1) shows up directly.
AMBIG_DATA = dict(images=384, noise_sigma=0.5, style_sigma=0.10)
CROWD_DATA = dict(images=512, concepts=64, d_raw=16, noise_sigma=0.2,
                  style_sigma=0.0, concept_cos_cap=0.9)
BENCH_TRAIN = dict(epochs=24, batch_images=32, val_fraction=0.25,
                   eval_every=3)

ARMS = {
    "sc": {},
    "chamfer": {"kind": "chamfer"},
    "mil": {"kind": "mil"},
    "mp": {"kind": "mp"},
    "t1": {"t": 1},
    "no_global": {"add_global": False},
    "rand_init": {"init_slots": "random"},
    "crowd_k4_m4": {"data": CROWD_DATA},
    "crowd_k1_m4": {"data": CROWD_DATA, "k": 1},
    "crowd_k4_m1": {"data": CROWD_DATA, "m_max": 1},
    "crowd_k1_m1": {"data": CROWD_DATA, "k": 1, "m_max": 1},
}

_CACHE = {}


def _run_arm(arm, seed):
    key = (arm, seed)
    if key not in _CACHE:
        mods = ARMS[arm]
        data_cfg = CorpusConfig(m_max=mods.get("m_max", 4), seed=seed,
                                **mods.get("data", AMBIG_DATA))
        pred_cfg = SetPredictorConfig(
            k=mods.get("k", 4), t=mods.get("t", 4),
            add_global=mods.get("add_global", True),
            init_slots=mods.get("init_slots", "learnable"))
        loss_cfg = LossConfig(sim=SimilarityConfig(kind=mods.get("kind", "sc")))
        train_cfg = TrainConfig(seed=seed, **BENCH_TRAIN)
        result = train(generate_corpus(data_cfg), train_cfg, pred_cfg, loss_cfg)
        last = result.metrics[-1]
        _CACHE[key] = {
            "rsum": result.best_val_rsum,
            "cvar": 0.5 * (last.circ_var_visual + last.circ_var_text),
            "untrained": last.untrained_slot_fraction,
            "aborted": result.aborted,
        }
    return _CACHE[key]


def _verdict(number, ok, detail):
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {number} failed: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------

def test_criterion_01_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_tape = worst_fd = 0.0
    for _ in range(200):
        k1, k2 = (int(v) for v in rng.integers(1, 5, size=2))
        alpha = float(rng.choice([1.0, 16.0, 64.0]))
        x = rng.standard_normal((k1, 8))
        y = rng.standard_normal((k2, 8))
        cfg = SimilarityConfig(alpha=alpha)
        _, g = smooth_chamfer_grad(EmbeddingSet(x), EmbeddingSet(y), cfg)
        tape = tc.Tape()
        vx, vy = tape.var(x), tape.var(y)
        tape.backward(smooth_chamfer_taped(vx, vy, alpha))
        worst_tape = max(worst_tape, rel_error(
            [g.d_s1, g.d_s2], [tape.grad(vx), tape.grad(vy)]))
        numeric = numerical_grad(
            lambda arrs, cfg=cfg: smooth_chamfer(
                EmbeddingSet(arrs[0]), EmbeddingSet(arrs[1]), cfg),
            [x.copy(), y.copy()])
        worst_fd = max(worst_fd, rel_error([g.d_s1, g.d_s2], numeric))

    # end-to-end: loss through both set predictors, 20 scalar parameter probes
    worst_e2e = _end_to_end_probe_error(n_probes=20)
    dt = time.time() - t0
    ok = worst_tape < 1e-6 and worst_fd < 1e-6 and worst_e2e < 1e-4 and dt < 60
    _verdict(1, ok, f"closed-form vs tape {worst_tape:.1e}, vs FD "
                    f"{worst_fd:.1e}, end-to-end {worst_e2e:.1e}, {dt:.0f}s")


def _end_to_end_probe_error(n_probes):
    rng = np.random.default_rng(42)
    cfg = SetPredictorConfig(k=2, t=2, d=6, d_h=6)
    loss_cfg = LossConfig()
    params = {}
    for prefix in ("v", "t"):
        for name, arr in init_params(cfg, rng).items():
            params[f"{prefix}.{name}"] = arr
    params["v.mlp_w2"] = 0.1 * rng.standard_normal(params["v.mlp_w2"].shape)
    params["t.mlp_w2"] = 0.1 * rng.standard_normal(params["t.mlp_w2"].shape)
    feats_v = [SampleFeatures(rng.standard_normal((4, 6)),
                              rng.standard_normal((1, 6))) for _ in range(3)]
    feats_t = [SampleFeatures(rng.standard_normal((3, 6)),
                              rng.standard_normal((1, 6))) for _ in range(6)]
    cap_to_img = [i // 2 for i in range(6)]

    def loss_value(pvals, tape=None):
        pv = ({n: tape.var(v) for n, v in pvals.items()} if tape is not None
              else {n: tc.constant(v) for n, v in pvals.items()})
        sub = lambda pre: {n.split(".", 1)[1]: v for n, v in pv.items()
                           if n.startswith(pre)}
        v_preds = [predict_set(f, sub("v."), cfg) for f in feats_v]
        t_preds = [predict_set(f, sub("t."), cfg) for f in feats_t]
        parts = total_loss_taped(
            tc.concat_rows([p.embedding for p in v_preds]),
            tc.concat_rows([p.embedding for p in t_preds]),
            [p.slots for p in v_preds], [p.slots for p in t_preds],
            cap_to_img, cfg.k, loss_cfg)
        return pv, parts.total

    tape = tc.Tape()
    pv, total = loss_value(params, tape)
    tape.backward(total)
    analytic = {n: tape.grad(v) for n, v in pv.items()}

    names = sorted(params)
    h = 1e-5
    worst = 0.0
    probe_rng = np.random.default_rng(99)
    for _ in range(n_probes):
        name = names[int(probe_rng.integers(len(names)))]
        arr = params[name]
        i = int(probe_rng.integers(arr.shape[0]))
        j = int(probe_rng.integers(arr.shape[1]))
        orig = arr[i, j]
        arr[i, j] = orig + h
        _, up = loss_value(params)
        arr[i, j] = orig - h
        _, down = loss_value(params)
        arr[i, j] = orig
        fd = (up.item() - down.item()) / (2 * h)
        denom = max(abs(analytic[name][i, j]), abs(fd), 1e-6)
        worst = max(worst, abs(analytic[name][i, j] - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# 2-4. closed-form structure checks
# ---------------------------------------------------------------------------

def test_criterion_02_singleton_reduction():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        s1 = EmbeddingSet(rng.standard_normal((1, 8)))
        s2 = EmbeddingSet(rng.standard_normal((1, 8)))
        c = float(similarity(s1, s2, SimilarityConfig(kind=SimilarityKind.MIL)))
        worst = max(worst,
                    abs(smooth_chamfer(s1, s2, SimilarityConfig()) - c),
                    abs(chamfer(s1, s2) - c))
    _verdict(2, worst < 1e-12, f"max |SC-Chamfer-MIL| = {worst:.2e}")


def test_criterion_03_lse_bound():
    rng = np.random.default_rng(2)
    ok = True
    worst_gap_256 = 0.0
    for alpha in (1.0, 4.0, 16.0, 64.0, 256.0):
        for _ in range(1000):
            k1, k2 = (int(v) for v in rng.integers(1, 5, size=2))
            s1 = EmbeddingSet(rng.standard_normal((k1, 8)))
            s2 = EmbeddingSet(rng.standard_normal((k2, 8)))
            gap = (smooth_chamfer(s1, s2, SimilarityConfig(alpha=alpha))
                   - chamfer(s1, s2))
            bound = (np.log(k1) + np.log(k2)) / (2 * alpha)
            ok &= -1e-12 <= gap <= bound + 1e-12
            if alpha == 256.0 and k1 == 4 and k2 == 4:
                worst_gap_256 = max(worst_gap_256, gap)
    ok &= worst_gap_256 < 0.011
    _verdict(3, ok, f"bound held at all alpha; K=4 gap at alpha=256 "
                    f"= {worst_gap_256:.2e} < 0.011")


def test_criterion_04_attention_sums():
    cfg = SetPredictorConfig(k=4, t=3, d=8, d_h=8)
    worst_a = worst_hat = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_params(cfg, rng)
        params["mlp_w2"] = 0.1 * rng.standard_normal(params["mlp_w2"].shape)
        pv = {k: tc.constant(v) for k, v in params.items()}
        feats = SampleFeatures(rng.standard_normal((6, 8)),
                               rng.standard_normal((1, 8)))
        out = predict_set(feats, pv, cfg)
        worst_a = max(worst_a, np.abs(out.attn.sum(axis=1) - 1.0).max())
        hat = out.attn / (out.attn.sum(axis=0, keepdims=True) + 1e-8)
        worst_hat = max(worst_hat, np.abs(hat.sum(axis=0) - 1.0).max())
    ok = worst_a < 1e-9 and worst_hat < 1e-7
    _verdict(4, ok, f"row-sum dev {worst_a:.1e}, column-sum dev {worst_hat:.1e}")


# ---------------------------------------------------------------------------
# 5-10. trend criteria on the synthetic benchmark
# ---------------------------------------------------------------------------

def test_criterion_05_collapse_trend():
    t0 = time.time()
    wins = [_run_arm("sc", s)["cvar"] > _run_arm("mp", s)["cvar"]
            for s in SEEDS]
    detail = ", ".join(
        f"seed {s}: SC {_run_arm('sc', s)['cvar']:.4f} vs "
        f"MP {_run_arm('mp', s)['cvar']:.4f}" for s in SEEDS)
    ok = all(wins) and (time.time() - t0) < 1800
    _verdict(5, ok, f"circular variance {detail}")


def test_criterion_06_sparse_supervision():
    wins = [_run_arm("mil", s)["untrained"] > _run_arm("sc", s)["untrained"]
            for s in SEEDS]
    detail = ", ".join(
        f"seed {s}: MIL {_run_arm('mil', s)['untrained']:.3f} vs "
        f"SC {_run_arm('sc', s)['untrained']:.3f}" for s in SEEDS)
    _verdict(6, all(wins), f"untrained-slot fraction {detail}")


def test_criterion_07_similarity_ordering():
    wins = 0
    details = []
    for s in SEEDS:
        sc = _run_arm("sc", s)["rsum"]
        ch = _run_arm("chamfer", s)["rsum"]
        lo = max(_run_arm("mil", s)["rsum"], _run_arm("mp", s)["rsum"])
        wins += int(sc >= ch >= lo)
        details.append(f"seed {s}: SC {sc:.1f}, Chamfer {ch:.1f}, "
                       f"max(MIL,MP) {lo:.1f}")
    _verdict(7, wins >= 2, "; ".join(details) + f" ({wins}/3 ordered)")


def test_criterion_08_cardinality_trend():
    gaps_m4, gaps_m1, wins = [], [], 0
    for s in SEEDS:
        k4 = _run_arm("crowd_k4_m4", s)["rsum"]
        k1 = _run_arm("crowd_k1_m4", s)["rsum"]
        wins += int(k4 > k1)
        gaps_m4.append(k4 - k1)
        gaps_m1.append(_run_arm("crowd_k4_m1", s)["rsum"]
                       - _run_arm("crowd_k1_m1", s)["rsum"])
    shrinks = float(np.mean(gaps_m1)) < float(np.mean(gaps_m4))
    ok = wins == 3 and shrinks
    _verdict(8, ok, f"K4-K1 gap ambiguous {np.mean(gaps_m4):+.1f} "
                    f"({wins}/3 positive) vs unambiguous "
                    f"{np.mean(gaps_m1):+.1f}")


def test_criterion_09_iteration_trend():
    wins = sum(_run_arm("sc", s)["rsum"] > _run_arm("t1", s)["rsum"]
               for s in SEEDS)
    detail = ", ".join(
        f"seed {s}: T4 {_run_arm('sc', s)['rsum']:.1f} vs "
        f"T1 {_run_arm('t1', s)['rsum']:.1f}" for s in SEEDS)
    _verdict(9, wins >= 2, f"{detail} ({wins}/3)")


def test_criterion_10_appendix_ablation_direction():
    wins = 0
    details = []
    for s in SEEDS:
        base = _run_arm("sc", s)["rsum"]
        no_glob = _run_arm("no_global", s)["rsum"]
        rand = _run_arm("rand_init", s)["rsum"]
        wins += int((base - no_glob) > (base - rand))
        details.append(f"seed {s}: -global {base - no_glob:+.1f} vs "
                       f"-learnable-init {base - rand:+.1f}")
    _verdict(10, wins >= 2, "; ".join(details) + f" ({wins}/3)")


# ---------------------------------------------------------------------------
# 11-12. pipeline determinism and benchmark sanity
# ---------------------------------------------------------------------------

def test_criterion_11_cli_determinism(tmp_path, capsys):
    cfg = {"data": {"images": 16, "concepts": 8, "d_raw": 16,
                    "noise_sigma": 0.3, "style_sigma": 0.15},
           "predictor": {"k": 2, "t": 2, "d": 12, "d_h": 12},
           "train": {"epochs": 2, "batch_images": 8, "val_fraction": 0.25}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    ckpts, trains = [], []
    for tag, workers in (("a", "1"), ("b", "4")):
        ckpt = tmp_path / f"{tag}.divp"
        code = cli_main(["--workers", workers, "train",
                         "--config", str(cfg_path), "--out", str(ckpt)])
        doc = json.loads(capsys.readouterr().out)
        doc.pop("checkpoint")
        assert code == 0
        trains.append(doc)
        ckpts.append(ckpt.read_bytes())
    evals = []
    for workers in ("1", "4"):
        code = cli_main(["--workers", workers, "eval",
                         "--checkpoint", str(tmp_path / "a.divp")])
        assert code == 0
        evals.append(capsys.readouterr().out)
    ok = trains[0] == trains[1] and ckpts[0] == ckpts[1] and evals[0] == evals[1]
    _verdict(11, ok, "train and eval outputs byte-identical across reruns "
                     "and worker counts")


def test_criterion_12_benchmark_sanity():
    ops = op_count(SimilarityKind.SMOOTH_CHAMFER, 4, 4, 1024)
    reference = 16400   # 16.4K, the documented reference cost at K=4, D=1024
    ok = reference / 2 < ops < reference * 2
    _verdict(12, ok, f"SC op count {ops} vs reference {reference} "
                     f"(multiply-accumulate convention, see README)")
