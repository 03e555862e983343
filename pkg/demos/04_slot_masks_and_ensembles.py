"""Probing a trained model: which slots carry the retrieval signal?

Trains briefly, then re-scores the corpus with individual slots masked
out and with two checkpoints ensembled by score averaging.  Masking
shows how unevenly the slots contribute after a short run (on a tiny
corpus a noisy slot can even hurt); averaging a model's scores with
themselves changes nothing, while ensembling two seeds usually helps.
"""

import numpy as np

from divemb import (CorpusConfig, LossConfig, SetPredictorConfig, TrainConfig,
                    ensemble_scores, evaluate_retrieval, generate_corpus,
                    score_matrix, train)
from divemb.evaluate import evaluate_from_scores, slot_ablation_eval
from divemb.trainer import build_indexes

data_cfg = CorpusConfig(images=64, m_max=3, noise_sigma=0.4, style_sigma=0.15,
                        seed=0)
pred_cfg = SetPredictorConfig(k=3, t=2)
loss_cfg = LossConfig()
corpus = generate_corpus(data_cfg)
result = train(corpus, TrainConfig(epochs=10, batch_images=16,
                                   val_fraction=0.25, eval_every=5, seed=0),
               pred_cfg, loss_cfg)
vis, txt, matches = build_indexes(corpus.samples, result.params, pred_cfg)

full = evaluate_retrieval(vis, txt, matches, loss_cfg.sim)
print(f"all {pred_cfg.k} slots:         rsum {full.rsum:.1f}")

for drop in range(pred_cfg.k):
    mask = np.ones(pred_cfg.k, dtype=bool)
    mask[drop] = False
    report = slot_ablation_eval(vis, txt, matches, loss_cfg.sim,
                                visual_keep=mask, text_keep=mask)
    print(f"slot {drop} masked out:      rsum {report.rsum:.1f}")

scores = score_matrix(vis, txt, loss_cfg.sim)
self_ens = evaluate_from_scores(ensemble_scores(scores, scores), vis, txt,
                                matches)
print(f"self-ensemble (sanity): rsum {self_ens.rsum:.1f} "
      f"(identical to the full model, as it must be)")

other = train(corpus, TrainConfig(epochs=10, batch_images=16,
                                  val_fraction=0.25, eval_every=5, seed=1),
              pred_cfg, loss_cfg)
vis2, txt2, _ = build_indexes(corpus.samples, other.params, pred_cfg)
pair = evaluate_from_scores(
    ensemble_scores(scores, score_matrix(vis2, txt2, loss_cfg.sim)),
    vis, txt, matches)
print(f"two-seed ensemble:      rsum {pair.rsum:.1f}")
