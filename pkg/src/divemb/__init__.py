"""Set-based cross-modal embeddings with smooth-Chamfer similarity.

Each sample (an image or a caption) is embedded as a small *set* of vectors
produced by a slot-attention aggregation module, so that ambiguous samples
can cover several meanings at once.  The package provides the similarity
family (smooth-Chamfer, Chamfer, MIL, match-probability), analytic and taped
gradients that cross-check each other, the set-prediction module, the
triplet-plus-regularizers objective, a synthetic ambiguous corpus, an AdamW
trainer, a set-retrieval evaluator, and a CLI (``divemb``).
"""

from .config import ConfigError, RunConfig
from .data import ConceptBank, CorpusConfig, Corpus, generate_corpus, \
    load_corpus, save_corpus
from .evaluate import RetrievalReport, SetIndex, ensemble_scores, \
    evaluate_retrieval, score_matrix, slot_ablation_eval
from .gradcheck import numerical_grad, rel_error
from .objective import Batch, LossConfig, total_loss, triplet_loss
from .predictor import PredictedSet, SetPredictorConfig, init_params, \
    predict_set
from .similarity import EmbeddingSet, PairGrad, SimilarityConfig, \
    SimilarityKind, chamfer, mil, mp, op_count, similarity, smooth_chamfer, \
    smooth_chamfer_grad
from .tape import Tape, Var, constant
from .trainer import TrainConfig, TrainResult, build_indexes, \
    load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "ConceptBank", "ConfigError", "Corpus", "CorpusConfig",
    "EmbeddingSet", "LossConfig", "PairGrad", "PredictedSet",
    "RetrievalReport", "RunConfig", "SetIndex", "SetPredictorConfig",
    "SimilarityConfig", "SimilarityKind", "Tape", "TrainConfig",
    "TrainResult", "Var", "build_indexes", "chamfer", "constant",
    "ensemble_scores", "evaluate_retrieval", "generate_corpus", "init_params",
    "load_checkpoint", "load_corpus", "mil", "mp", "numerical_grad",
    "op_count", "predict_set", "rel_error", "save_checkpoint", "save_corpus",
    "score_matrix", "similarity", "slot_ablation_eval", "smooth_chamfer",
    "smooth_chamfer_grad", "total_loss", "train", "triplet_loss",
]
