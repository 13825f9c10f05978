"""Ranking encoder, outfit seq2seq model, fallback embedding head, losses."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fallback import FallbackModel, predict_embedding, train_fallback
from .losses import alternative_loss, clm_loss, ranking_loss_from_scores, sample_negatives
from .ranking import EncoderConfig, RankingModel, collate_examples, score_catalog, train_ranking
from .seq2seq import GeneratedOutfit, Seq2SeqConfig, Seq2SeqExample, Seq2SeqModel, build_seq2seq_examples, train_seq2seq
from .training import TrainConfig, TrainingDivergedError, TrainResult

__all__ = [
    "CheckpointError",
    "EncoderConfig",
    "FallbackModel",
    "GeneratedOutfit",
    "RankingModel",
    "Seq2SeqConfig",
    "Seq2SeqExample",
    "Seq2SeqModel",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "alternative_loss",
    "build_seq2seq_examples",
    "clm_loss",
    "collate_examples",
    "load_checkpoint",
    "predict_embedding",
    "ranking_loss_from_scores",
    "sample_negatives",
    "save_checkpoint",
    "score_catalog",
    "train_fallback",
    "train_ranking",
    "train_seq2seq",
]
