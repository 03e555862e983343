"""Train a small model on the synthetic ambiguous corpus and retrieve.

Generates a corpus whose images depict several concepts at once (so a
single vector cannot represent them faithfully), trains the set
predictor with the mined triplet objective, and reports cross-modal
recall before and after training.  Takes about a minute.
"""

import numpy as np

from divemb import (CorpusConfig, LossConfig, SetPredictorConfig, TrainConfig,
                    evaluate_retrieval, generate_corpus, train)
from divemb.trainer import build_indexes, init_model_params

data_cfg = CorpusConfig(images=64, m_max=3, noise_sigma=0.4, style_sigma=0.15,
                        seed=0)
pred_cfg = SetPredictorConfig(k=3, t=2)
loss_cfg = LossConfig()
train_cfg = TrainConfig(epochs=10, batch_images=16, val_fraction=0.25,
                        eval_every=2, seed=0)

corpus = generate_corpus(data_cfg)
print(f"corpus: {len(corpus.samples)} images, {corpus.n_captions} captions, "
      f"up to {data_cfg.m_max} concepts per image")

untrained = init_model_params(pred_cfg, data_cfg.d_raw, loss_cfg,
                              train_cfg.seed)
vis0, txt0, matches = build_indexes(corpus.samples, untrained, pred_cfg)
before = evaluate_retrieval(vis0, txt0, matches, loss_cfg.sim)
print(f"before training: rsum {before.rsum:.1f}")

result = train(corpus, train_cfg, pred_cfg, loss_cfg)
print("\nepoch metrics (triplet loss and validation rsum):")
for m in result.metrics:
    tag = f" val_rsum={m.val_rsum:.1f}" if m.val_rsum else ""
    print(f"  epoch {m.epoch:2d}: l_tri={m.l_tri:.4f}{tag}")

vis1, txt1, matches = build_indexes(corpus.samples, result.params, pred_cfg)
after = evaluate_retrieval(vis1, txt1, matches, loss_cfg.sim)
print(f"\nafter training: rsum {after.rsum:.1f} "
      f"(image->text R@1 {after.i2t_recall[1]:.1f}, "
      f"text->image R@1 {after.t2i_recall[1]:.1f})")
