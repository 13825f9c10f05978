"""Cheaper variant that predicts one embedding and ranks by dot product.

Training samples negatives and optimises a pairwise or pointwise loss, so no
full-vocabulary softmax is ever formed. Serving scores the catalogue with a
single matrix-vector product.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datamodel import Catalog, TrainingExample
from ..embedding import EmbeddingConfig, InputBatch
from ..numerics import Tape, Tensor, softmax
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import ALTERNATIVE_LOSSES, alternative_loss, sample_negatives
from .ranking import EncoderConfig, RankingModel, collate_examples
from .training import TrainConfig, TrainResult, fit


def predict_embedding(hidden_last: np.ndarray, head_w: np.ndarray, head_b: np.ndarray) -> np.ndarray:
    return hidden_last @ head_w + head_b


def dot_scores(embedding: np.ndarray, output_table: np.ndarray) -> np.ndarray:
    """One (n_targets × d)·(d) product for a single user."""
    return output_table @ embedding


class FallbackModel(RankingModel):
    kind = "fallback"

    def __init__(self, catalog: Catalog, encoder: EncoderConfig | None = None,
                 embedding: EmbeddingConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32, loss_kind: str = "bpr", negatives: int = 16):
        if loss_kind not in ALTERNATIVE_LOSSES:
            raise ValueError(f"unknown loss {loss_kind!r}")
        self.loss_kind = loss_kind
        self.negatives = negatives
        super().__init__(catalog, encoder or EncoderConfig(layers=1), embedding, params, seed, dtype)

    def _init_params(self, rng) -> dict[str, Tensor]:
        p = super()._init_params(rng)
        d = self.encoder.d_model
        p["head.w"] = Tensor((np.eye(d) + rng.normal(0, 0.02, (d, d))).astype(self.dtype), requires_grad=True,
                             name="head.w")
        p["head.b"] = Tensor(np.zeros(d, dtype=self.dtype), requires_grad=True, name="head.b")
        p["out"].data = rng.normal(0, 0.1, size=p["out"].shape).astype(self.dtype)
        return p

    def predicted(self, tape: Tape, hidden: Tensor) -> Tensor:
        return tape.add(tape.matmul(hidden, self.params["head.w"]), self.params["head.b"])

    def sampled_loss(self, tape: Tape, batch: InputBatch, target_ids: np.ndarray, target_mask: np.ndarray,
                     rng: np.random.Generator) -> Tensor:
        mask = target_mask.reshape(-1)
        if not mask.any():
            raise ValueError("fallback loss: target mask has no true bit")
        hidden = self.encode(tape, batch)
        d = hidden.shape[-1]
        rows = np.flatnonzero(mask)
        picked = tape.embedding_lookup(tape.reshape(hidden, (-1, d)), rows)
        pos = target_ids.reshape(-1)[rows]
        neg = sample_negatives(rng, pos, self.n_targets, self.negatives)
        return alternative_loss(tape, self.loss_kind, self.predicted(tape, picked), self.output_table, pos, neg)

    def embed_batch(self, batch: InputBatch) -> np.ndarray:
        h = self.last_hidden(Tape(record=False), batch).data
        return predict_embedding(h, self.params["head.w"].data, self.params["head.b"].data)

    def logits(self, batch: InputBatch) -> np.ndarray:
        return self.embed_batch(batch) @ self.output_table.data.T

    def score_batch(self, batch: InputBatch) -> np.ndarray:
        # normalised so pipeline scores stay non-negative; ordering is the dot-product order
        return softmax(self.logits(batch), axis=-1)

    def config_dict(self) -> dict:
        cfg = super().config_dict()
        cfg["objective"] = {"loss": self.loss_kind, "negatives": self.negatives}
        return cfg

    @classmethod
    def load(cls, path: str | Path, catalog: Catalog) -> "FallbackModel":
        meta, params = load_checkpoint(path, expect_kind=cls.kind)
        cfg = meta["config"]
        if cfg.get("catalog_fingerprint") != catalog.fingerprint():
            raise CheckpointError(f"{path}: checkpoint was trained on a different catalog")
        obj = cfg.get("objective", {})
        return cls(catalog, EncoderConfig(**cfg["encoder"]), EmbeddingConfig(**cfg["embedding"]), params=params,
                   dtype=cfg.get("dtype", "float32"), loss_kind=obj.get("loss", "bpr"),
                   negatives=obj.get("negatives", 16))


def train_fallback(examples: Sequence[TrainingExample], catalog: Catalog, encoder: EncoderConfig | None = None,
                   train: TrainConfig | None = None, loss_kind: str = "bpr", negatives: int = 16,
                   dtype=np.float32, checkpoint_path: str | Path | None = None) -> tuple[FallbackModel, TrainResult]:
    train = train or TrainConfig()
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    model = FallbackModel(catalog, encoder, seed=train.seed, dtype=dtype, loss_kind=loss_kind, negatives=negatives)
    max_len = model.encoder.max_len
    lengths = [len(e.interactions) for e in examples]

    def loss_fn(tape, idx, rng):
        batch, targets, mask = collate_examples(catalog, [examples[i] for i in idx], max_len)
        return model.sampled_loss(tape, batch, targets, mask, rng), float(mask.sum())

    result = fit(model.params, len(examples), lengths, loss_fn, train)
    if checkpoint_path is not None:
        model.save(checkpoint_path, extra={"train": train.to_dict(), "loss_curve": result.loss_curve,
                                           "encoder": asdict(model.encoder)})
    return model, result
