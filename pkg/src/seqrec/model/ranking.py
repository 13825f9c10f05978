"""Causal Transformer encoder trained with a masked next-entity objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datamodel import Catalog, Interaction, TrainingExample, UserContext
from ..embedding import (
    Embedder,
    EmbeddingConfig,
    InputBatch,
    config_for_catalog,
    encode_histories,
    init_embedding_params,
)
from ..numerics import Tape, Tensor, softmax
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import causal_mask, encoder_stack, init_encoder
from .losses import clm_loss
from .training import TrainConfig, TrainResult, fit


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 50
    target_entity_type: str = "outfit"
    activation: str = "relu"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")


def _check_params(expected: dict[str, Tensor], given: dict[str, Tensor]) -> None:
    missing = sorted(set(expected) - set(given))
    extra = sorted(set(given) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing={missing[:5]}, unexpected={extra[:5]})")
    for k, t in expected.items():
        if given[k].shape != t.shape:
            raise CheckpointError(f"parameter {k}: shape {given[k].shape}, model expects {t.shape}")


def collate_examples(catalog: Catalog, examples: Sequence[TrainingExample], max_len: int):
    """InputBatch plus per-row (B, L+1) target ids and mask."""
    batch = encode_histories(catalog, [e.context for e in examples], [e.interactions for e in examples],
                             [0] * len(examples), max_len, recencies=[e.recency for e in examples])
    rows = batch.rows
    targets = np.zeros((len(examples), rows), dtype=np.int64)
    mask = np.zeros((len(examples), rows), dtype=bool)
    for r, e in enumerate(examples):
        n = len(e.target_ids)
        targets[r, :n] = np.maximum(e.target_ids, 0)
        mask[r, :n] = e.target_mask
    return batch, targets, mask


def score_catalog(hidden_last: np.ndarray, output_table: np.ndarray,
                  candidate_ids: Sequence[int] | None = None) -> np.ndarray:
    """Softmax over target logits; with candidates, renormalised over that subset.

    Returns a full-vocabulary vector (zeros outside the candidates).
    """
    logits = np.asarray(hidden_last) @ np.asarray(output_table).T
    if candidate_ids is None:
        return softmax(logits, axis=-1)
    cand = np.asarray(list(candidate_ids), dtype=np.int64)
    if cand.size == 0:
        raise ValueError("score_catalog: empty candidate set")
    out = np.zeros_like(logits)
    out[..., cand] = softmax(logits[..., cand], axis=-1)
    return out


class RankingModel:
    kind = "ranking"

    def __init__(self, catalog: Catalog, encoder: EncoderConfig | None = None,
                 embedding: EmbeddingConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.encoder = encoder or EncoderConfig()
        self.embedding = embedding or config_for_catalog(
            catalog, d_model=self.encoder.d_model, max_len=self.encoder.max_len)
        if self.embedding.d_model != self.encoder.d_model or self.embedding.max_len != self.encoder.max_len:
            raise ValueError("embedding and encoder disagree on d_model / max_len")
        self.catalog = catalog
        self.dtype = np.dtype(dtype)
        self.n_targets = catalog.count(self.encoder.target_entity_type)
        if self.n_targets == 0:
            raise ValueError(f"catalog has no {self.encoder.target_entity_type} entities to rank")
        fresh = self._init_params(np.random.default_rng(seed))
        if params is not None:
            _check_params(fresh, params)
            for t in params.values():
                t.data = t.data.astype(self.dtype)
            fresh = params
        self.params = fresh
        self.embedder = Embedder(self.embedding, catalog, self.params, dtype=self.dtype)

    def _init_params(self, rng) -> dict[str, Tensor]:
        e = self.encoder
        p = init_embedding_params(self.embedding, rng, self.dtype)
        init_encoder(p, "enc", e.layers, e.d_model, e.d_ff, rng, self.dtype)
        p["out"] = Tensor(rng.normal(0, 0.02, size=(self.n_targets, e.d_model)).astype(self.dtype),
                          requires_grad=True, name="out")
        return p

    @property
    def output_table(self) -> Tensor:
        return self.params["out"]

    # -- forward ----------------------------------------------------------
    def encode(self, tape: Tape, batch: InputBatch, causal: bool = True) -> Tensor:
        """(B, L+1, d_model) hidden states; row t only sees rows <= t when causal."""
        if batch.rows > self.encoder.max_len + 1:
            raise ValueError(f"input has {batch.rows} rows, limit is max_len+1={self.encoder.max_len + 1}")
        x = tape.dropout(self.embedder.model_input(tape, batch), self.encoder.dropout)
        mask = causal_mask(batch.rows) if causal else batch.key_mask()[:, None, None, :]
        e = self.encoder
        return encoder_stack(tape, self.params, "enc", x, mask, e.layers, e.heads, e.dropout, e.activation)

    def last_hidden(self, tape: Tape, batch: InputBatch) -> Tensor:
        hidden = self.encode(tape, batch)
        b, t, d = hidden.shape
        rows = np.arange(b) * t + batch.lengths
        return tape.embedding_lookup(tape.reshape(hidden, (b * t, d)), rows)

    def loss(self, tape: Tape, batch: InputBatch, target_ids: np.ndarray, target_mask: np.ndarray) -> Tensor:
        return clm_loss(tape, self.encode(tape, batch), target_ids, target_mask, self.output_table)

    def encode_requests(self, contexts: Sequence[UserContext | None], histories: Sequence[Sequence[Interaction]],
                        reference_ts: Sequence[int]) -> InputBatch:
        return encode_histories(self.catalog, contexts, histories, reference_ts, self.encoder.max_len,
                                self.embedding.recency_max)

    def logits(self, batch: InputBatch) -> np.ndarray:
        h = self.last_hidden(Tape(record=False), batch).data
        return h @ self.output_table.data.T

    def score_batch(self, batch: InputBatch) -> np.ndarray:
        h = self.last_hidden(Tape(record=False), batch).data
        return score_catalog(h, self.output_table.data)

    def score_history(self, context: UserContext | None, interactions: Sequence[Interaction],
                      reference_ts: int) -> np.ndarray:
        """Probabilities over the target vocabulary for one user."""
        return self.score_batch(self.encode_requests([context], [interactions], [reference_ts]))[0]

    def entity_vectors(self) -> np.ndarray:
        return self.embedder.entity_vectors(Tape(record=False)).data

    # -- persistence ------------------------------------------------------
    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "embedding": self.embedding.to_dict(),
                "dtype": self.dtype.name, "catalog_fingerprint": self.catalog.fingerprint()}

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.kind, self.config_dict(), self.params, extra)

    @classmethod
    def load(cls, path: str | Path, catalog: Catalog) -> "RankingModel":
        meta, params = load_checkpoint(path, expect_kind=cls.kind)
        cfg = meta["config"]
        if cfg.get("catalog_fingerprint") != catalog.fingerprint():
            raise CheckpointError(f"{path}: checkpoint was trained on a different catalog")
        return cls(catalog, EncoderConfig(**cfg["encoder"]), EmbeddingConfig(**cfg["embedding"]),
                   params=params, dtype=cfg.get("dtype", "float32"))


def train_ranking(examples: Sequence[TrainingExample], catalog: Catalog, encoder: EncoderConfig | None = None,
                  train: TrainConfig | None = None, embedding: EmbeddingConfig | None = None,
                  dtype=np.float32, checkpoint_path: str | Path | None = None) -> tuple[RankingModel, TrainResult]:
    """Train a ranking model from scratch; deterministic given ``train.seed``."""
    train = train or TrainConfig()
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    model = RankingModel(catalog, encoder, embedding, seed=train.seed, dtype=dtype)
    max_len = model.encoder.max_len
    lengths = [len(e.interactions) for e in examples]

    def loss_fn(tape, idx, rng):
        batch, targets, mask = collate_examples(catalog, [examples[i] for i in idx], max_len)
        return model.loss(tape, batch, targets, mask), float(mask.sum())

    def initial_loss():
        probe = examples[:512]
        batch, targets, mask = collate_examples(catalog, probe, max_len)
        return float(model.loss(Tape(record=False), batch, targets, mask).data)

    result = fit(model.params, len(examples), lengths, loss_fn, train, initial_loss_fn=initial_loss)
    if checkpoint_path is not None:
        model.save(checkpoint_path, extra={"train": train.to_dict(), "loss_curve": result.loss_curve,
                                           "initial_loss": result.initial_loss})
    return model, result
