"""Command-line entry point: data generation, training, evaluation,
gradient checking, benchmarking, and ablation sweeps.

All outputs are UTF-8 JSON/CSV with no timestamps, so repeated runs with the
same config and seed are byte-identical.  Exit codes: 0 success, 1 validation
error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time

import numpy as np

import divemb.data as dd
import divemb.evaluate as ev
import divemb.gradcheck as gc
import divemb.tape as tc
import divemb.trainer as tr
from .config import ConfigError, RunConfig
from .objective import Batch, LossConfig, total_loss
from .similarity import EmbeddingSet, SimilarityConfig, SimilarityKind, \
    op_count, smooth_chamfer, smooth_chamfer_grad, smooth_chamfer_taped


class NumericFailure(RuntimeError):
    pass


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    return RunConfig.from_file(path)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    doc = cfg.to_dict()
    if getattr(args, "similarity", None):
        doc["loss"]["sim"]["kind"] = args.similarity
    if getattr(args, "k", None):
        doc["predictor"]["k"] = args.k
    if getattr(args, "seed", None) is not None:
        doc["train"]["seed"] = args.seed
        doc["data"]["seed"] = args.seed
    return RunConfig.from_dict(doc)


def _emit(doc: dict, out_path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _get_corpus(cfg: RunConfig, corpus_path):
    if corpus_path:
        return dd.load_corpus(corpus_path)
    return dd.generate_corpus(cfg.data)


def _eval_samples(corpus, cfg: RunConfig):
    if cfg.eval_opts.get("split") == "all":
        return corpus.samples
    _, val = tr._split(corpus, cfg.train)
    return val


def _report_doc(report: ev.RetrievalReport, cfg: RunConfig) -> dict:
    doc = report.to_dict()
    doc["config_digest"] = cfg.digest()
    return doc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    corpus = dd.generate_corpus(cfg.data)
    dd.save_corpus(args.out, corpus)
    _emit({
        "config_digest": cfg.digest(),
        "images": len(corpus.samples),
        "captions": sum(len(s.captions) for s in corpus.samples),
        "concepts": cfg.data.concepts,
        "file_sha256": _file_sha256(args.out),
        "out": str(args.out),
    })
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    corpus = _get_corpus(cfg, args.corpus)
    result = tr.train(corpus, cfg.train, cfg.predictor, cfg.loss)
    if not np.all([np.all(np.isfinite(v)) for v in result.params.values()]):
        raise NumericFailure("non-finite parameters after training")
    echo = cfg.to_dict()
    tr.save_checkpoint(args.out, result.params, echo)
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8") as fh:
            fh.write(tr.EpochMetrics.CSV_HEADER + "\n")
            for m in result.metrics:
                fh.write(m.csv_row() + "\n")
    _emit({
        "config_digest": cfg.digest(),
        "best_val_rsum": round(result.best_val_rsum, 4),
        "epochs": len(result.metrics),
        "aborted": result.aborted,
        "checkpoint": str(args.out),
    })
    if result.aborted:
        raise NumericFailure("training aborted on non-finite loss; "
                             "last good checkpoint was kept")
    return 0


def _parse_mask(text: str) -> np.ndarray:
    bits = [b.strip() for b in text.split(",")]
    if not bits or any(b not in ("0", "1") for b in bits):
        raise ConfigError(f"slot mask must be comma-separated 0/1 bits: {text!r}")
    mask = np.array([b == "1" for b in bits])
    if not mask.any():
        raise ConfigError("slot mask keeps no elements")
    return mask


def cmd_eval(args) -> int:
    params, echo, _ = tr.load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(echo)
    cfg = _apply_overrides(cfg, args)
    corpus = _get_corpus(cfg, args.corpus)
    samples = _eval_samples(corpus, cfg)
    v_idx, t_idx, match = tr.build_indexes(samples, params, cfg.predictor)
    ks = tuple(cfg.eval_opts["recall_ks"])
    if args.ensemble:
        params_b, echo_b, _ = tr.load_checkpoint(args.ensemble)
        cfg_b = RunConfig.from_dict(echo_b)
        v_b, t_b, _ = tr.build_indexes(samples, params_b, cfg_b.predictor)
        scores = ev.ensemble_scores(
            ev.score_matrix(v_idx, t_idx, cfg.loss.sim),
            ev.score_matrix(v_b, t_b, cfg_b.loss.sim))
        report = ev.evaluate_from_scores(scores, v_idx, t_idx, match, ks)
    elif args.slot_mask:
        mask = _parse_mask(args.slot_mask)
        if mask.size != cfg.predictor.k:
            raise ConfigError(f"slot mask has {mask.size} bits but sets "
                              f"have {cfg.predictor.k} elements")
        report = ev.slot_ablation_eval(v_idx, t_idx, match, cfg.loss.sim,
                                       visual_keep=mask, text_keep=mask)
    else:
        report = ev.evaluate_retrieval(v_idx, t_idx, match, cfg.loss.sim, ks)
    _emit(_report_doc(report, cfg), args.out)
    return 0


def _check_closed_form(pairs: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for kind, tol in (("closed-form-vs-tape", 1e-6), ("closed-form-vs-fd", 1e-6)):
        worst = 0.0
        for _ in range(pairs):
            k1 = int(rng.integers(1, 5))
            k2 = int(rng.integers(1, 5))
            alpha = float(rng.choice([1.0, 16.0, 64.0]))
            x = rng.standard_normal((k1, 8))
            y = rng.standard_normal((k2, 8))
            scfg = SimilarityConfig(alpha=alpha)
            _, g = smooth_chamfer_grad(EmbeddingSet(x), EmbeddingSet(y), scfg)
            if kind == "closed-form-vs-tape":
                t = tc.Tape()
                vx, vy = t.var(x), t.var(y)
                out = smooth_chamfer_taped(vx, vy, alpha)
                t.backward(out)
                ref = [t.grad(vx), t.grad(vy)]
            else:
                def f(arrs, scfg=scfg):
                    return smooth_chamfer(
                        EmbeddingSet(arrs[0]), EmbeddingSet(arrs[1]), scfg)
                ref = gc.numerical_grad(f, [x, y])
            worst = max(worst, gc.rel_error([g.d_s1, g.d_s2], ref))
        rows.append({"check": kind, "pairs": pairs,
                     "max_rel_err": worst, "tol": tol, "ok": worst < tol})
    return rows


def _check_end_to_end(probes: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    cfg = LossConfig(sim=SimilarityConfig(alpha=16.0))
    worst = 0.0
    for _ in range(probes):
        bi, k, d = 3, 2, 6
        v = [EmbeddingSet(rng.standard_normal((k, d))) for _ in range(bi)]
        t = [EmbeddingSet(rng.standard_normal((k, d))) for _ in range(2 * bi)]
        cap_to_img = [i // 2 for i in range(2 * bi)]
        batch = Batch(v, t, cap_to_img)
        # slots are distinct tensors in the real model; hold them fixed so
        # the finite difference isolates the fused-embedding gradient
        slots_v = [rng.standard_normal((k, d)) for _ in range(bi)]
        slots_t = [rng.standard_normal((k, d)) for _ in range(2 * bi)]
        _, grads, _ = total_loss(batch, slots_v, slots_t, cfg)

        def f(arrays):
            vv = [EmbeddingSet(a) for a in arrays[:bi]]
            tt = [EmbeddingSet(a) for a in arrays[bi:]]
            val, _, _ = total_loss(Batch(vv, tt, cap_to_img),
                                   slots_v, slots_t, cfg)
            return val

        arrays = [s.elems.copy() for s in v] + [s.elems.copy() for s in t]
        ref = gc.numerical_grad(f, arrays)
        worst = max(worst, gc.rel_error(list(grads.d_s1) + list(grads.d_s2),
                                        ref))
    return {"check": "loss-end-to-end-vs-fd", "pairs": probes,
            "max_rel_err": worst, "tol": 1e-4, "ok": worst < 1e-4}


def cmd_gradcheck(args) -> int:
    rows = []
    if args.only in (None, "smooth-chamfer"):
        rows.extend(_check_closed_form(args.pairs, args.seed))
    if args.only in (None, "end-to-end"):
        rows.append(_check_end_to_end(max(1, args.pairs // 10), args.seed))
    for r in rows:
        status = "pass" if r["ok"] else "FAIL"
        print(f"{status}  {r['check']:28s} n={r['pairs']:<4d} "
              f"max_rel_err={r['max_rel_err']:.3e}  tol={r['tol']:.0e}")
    if not all(r["ok"] for r in rows):
        raise NumericFailure("gradient check failed")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    rng = np.random.default_rng(0)
    k, d, n = args.k, args.dim, args.pairs
    a = ev.SetIndex.build(
        [EmbeddingSet(rng.standard_normal((k, d))) for _ in range(n)],
        list(range(n)), "visual")
    b = ev.SetIndex.build(
        [EmbeddingSet(rng.standard_normal((k, d))) for _ in range(n)],
        list(range(n)), "text")
    doc = {"k": k, "dim": d, "pairs_scored": n * n,
           "config_digest": cfg.digest(), "kinds": {}}
    for kind in SimilarityKind:
        scfg = SimilarityConfig(kind=kind, alpha=cfg.loss.sim.alpha)
        t0 = time.perf_counter()
        ev.score_matrix(a, b, scfg)
        dt = time.perf_counter() - t0
        doc["kinds"][kind.value] = {
            "ops_per_pair": op_count(kind, k, k, d),
            "pairs_per_sec": round(n * n / max(dt, 1e-12), 1),
        }
    # throughput is machine-dependent; keep it out of the determinism surface
    if args.no_timing:
        for entry in doc["kinds"].values():
            del entry["pairs_per_sec"]
    _emit(doc, args.out)
    return 0


_ABLATE_GRIDS = {
    "similarity": [("similarity", k.value) for k in SimilarityKind],
    "k": [("k", v) for v in (1, 2, 3, 4, 5, 6)],
    "t": [("t", v) for v in (1, 2, 3, 4, 5, 6)],
    "alpha": [("alpha", v) for v in (1.0, 4.0, 16.0, 64.0)],
}


def cmd_ablate(args) -> int:
    base = _apply_overrides(_load_config(args.config), args)
    if args.grid not in _ABLATE_GRIDS:
        raise ConfigError(f"unknown grid {args.grid!r}; "
                          f"choose from {sorted(_ABLATE_GRIDS)}")
    points = _ABLATE_GRIDS[args.grid]
    if args.only:
        wanted = {w.strip() for w in args.only.split(",")}
        points = [(f, v) for f, v in points if str(v) in wanted]
        if not points:
            raise ConfigError(f"--only matched nothing in grid {args.grid!r}")
    corpus = dd.generate_corpus(base.data)
    rows = []
    for field, value in points:
        doc = base.to_dict()
        if field == "similarity":
            doc["loss"]["sim"]["kind"] = value
        elif field == "k":
            doc["predictor"]["k"] = value
        elif field == "t":
            doc["predictor"]["t"] = value
        else:
            doc["loss"]["sim"]["alpha"] = value
        cfg = RunConfig.from_dict(doc)
        result = tr.train(corpus, cfg.train, cfg.predictor, cfg.loss)
        rows.append((field, value, result.best_val_rsum))
    lines = ["grid,value,val_rsum"]
    lines += [f"{f},{v},{r:.4f}" for f, v, r in rows]
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; we reserve that
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="divemb",
                description="Set-based cross-modal embedding toolkit")
    p.add_argument("--workers", type=int, default=None,
                   help="cap on scoring/training threads (results are "
                        "identical for any value)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="JSON run config (all fields "
                            "default when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="override data/train seed")

    sp = sub.add_parser("datagen", help="generate a synthetic corpus file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_datagen)

    sp = sub.add_parser("train", help="train a model and save a checkpoint")
    common(sp)
    sp.add_argument("--corpus", help="existing corpus file (else generated)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="per-epoch metrics CSV path")
    sp.add_argument("--similarity", choices=[k.value for k in SimilarityKind])
    sp.add_argument("--k", type=int, help="set cardinality override")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="retrieval report for a checkpoint")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="existing corpus file (else regenerated "
                    "from the checkpoint's config echo)")
    sp.add_argument("--slot-mask", help="comma-separated 0/1 bits, one per "
                    "set element, e.g. 1,0,1,1")
    sp.add_argument("--ensemble", help="second checkpoint; scores averaged")
    sp.add_argument("--similarity", choices=[k.value for k in SimilarityKind])
    sp.add_argument("--out", help="also write the JSON report here")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="analytic vs numeric gradient table")
    sp.add_argument("--pairs", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--only", choices=["smooth-chamfer", "end-to-end"])
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="per-pair op counts and throughput")
    common(sp, seed=False)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--dim", type=int, default=1024)
    sp.add_argument("--pairs", type=int, default=64,
                    help="index size per side (pairs scored = n^2)")
    sp.add_argument("--no-timing", action="store_true",
                    help="omit machine-dependent throughput from the output")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("ablate", help="sweep similarity kind, K, T, or alpha")
    common(sp)
    sp.add_argument("--grid", default="similarity",
                    choices=sorted(_ABLATE_GRIDS))
    sp.add_argument("--only", help="comma-separated grid values to keep")
    sp.add_argument("--out", help="CSV output path")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, dataclasses.FrozenInstanceError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
