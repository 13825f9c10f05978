"""Encoder-decoder model that writes an outfit item by item.

The encoder reads the user context and the interactions preceding an outfit
interaction; the decoder is teacher-forced on ``[BOS, item_1 .. item_n]`` and
predicts ``[item_1 .. item_n, EOS]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..datamodel import Catalog, Interaction, UserContext, compute_recency
from ..embedding import Embedder, EmbeddingConfig, InputBatch, config_for_catalog, encode_histories, init_embedding_params
from ..numerics import Tape, Tensor, softmax
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import causal_mask, decoder_stack, encoder_stack, init_decoder, init_encoder, padding_mask
from .ranking import _check_params
from .training import TrainConfig, TrainResult, fit


@dataclass
class Seq2SeqConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 50
    max_items: int = 8
    activation: str = "relu"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")


@dataclass(frozen=True)
class Seq2SeqExample:
    context: UserContext
    interactions: tuple[Interaction, ...]
    recency: tuple[int, ...]
    outfit_id: str
    item_ids: tuple[str, ...]


@dataclass
class GeneratedOutfit:
    item_ids: list[str]
    probabilities: list[float] = field(default_factory=list)


def build_seq2seq_examples(sequence: Sequence[Interaction], context: UserContext | None, catalog: Catalog,
                           max_len: int, reference_ts: int, recency_max: int = 30) -> list[Seq2SeqExample]:
    """One example per outfit interaction, encoder fed the interactions before it."""
    context = context or UserContext()
    out = []
    for j, inter in enumerate(sequence):
        if inter.entity_type != "outfit":
            continue
        before = tuple(sequence[max(0, j - max_len):j])
        rec = tuple(compute_recency(i.timestamp, reference_ts, recency_max) for i in before)
        out.append(Seq2SeqExample(context, before, rec, inter.entity_id, catalog.outfits[inter.entity_id].item_ids))
    return out


class Seq2SeqModel:
    kind = "seq2seq"

    def __init__(self, catalog: Catalog, config: Seq2SeqConfig | None = None,
                 embedding: EmbeddingConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config or Seq2SeqConfig()
        self.embedding = embedding or config_for_catalog(
            catalog, d_model=self.config.d_model, max_len=self.config.max_len)
        self.catalog = catalog
        self.dtype = np.dtype(dtype)
        self.n_items = catalog.count("item")
        self.eos = self.n_items
        self.bos = self.n_items
        fresh = self._init_params(np.random.default_rng(seed))
        if params is not None:
            _check_params(fresh, params)
            for t in params.values():
                t.data = t.data.astype(self.dtype)
            fresh = params
        self.params = fresh
        self.embedder = Embedder(self.embedding, catalog, self.params, dtype=self.dtype)

    def _init_params(self, rng) -> dict[str, Tensor]:
        c, dt = self.config, self.dtype
        p = init_embedding_params(self.embedding, rng, dt)
        init_encoder(p, "enc", c.enc_layers, c.d_model, c.d_ff, rng, dt)
        init_decoder(p, "dec", c.dec_layers, c.d_model, c.d_ff, rng, dt)
        w = self.embedding.entity_width

        def param(name, shape, std):
            p[name] = Tensor(rng.normal(0, std, size=shape).astype(dt), requires_grad=True, name=name)

        param("dec.tok_proj", (w, c.d_model), 1.0 / np.sqrt(w))
        param("dec.bos", (1, c.d_model), 0.1)
        param("dec.pos", (c.max_items + 1, c.d_model), 0.02)
        param("dec.out", (self.n_items + 1, c.d_model), 0.02)
        return p

    # -- forward ----------------------------------------------------------
    def memory(self, tape: Tape, batch: InputBatch, entity_vecs: Tensor | None = None) -> Tensor:
        c = self.config
        x = tape.dropout(self.embedder.model_input(tape, batch, entity_vecs), c.dropout)
        mask = padding_mask(batch.key_mask())
        return encoder_stack(tape, self.params, "enc", x, mask, c.enc_layers, c.heads, c.dropout, c.activation)

    def token_table(self, tape: Tape, entity_vecs: Tensor) -> Tensor:
        """(n_items + 1, d_model): item rows from their feature vectors, last row BOS."""
        items = tape.embedding_lookup(entity_vecs, np.arange(self.n_items))
        return tape.concat([tape.matmul(items, self.params["dec.tok_proj"]), self.params["dec.bos"]], axis=0)

    def decode(self, tape: Tape, memory: Tensor, enc_valid: np.ndarray, tokens: np.ndarray,
               table: Tensor) -> Tensor:
        c = self.config
        s = tokens.shape[1]
        if s > c.max_items + 1:
            raise ValueError(f"decoder input of {s} tokens exceeds max_items+1={c.max_items + 1}")
        x = tape.add(tape.embedding_lookup(table, tokens), tape.embedding_lookup(self.params["dec.pos"], np.arange(s)))
        x = tape.dropout(x, c.dropout)
        return decoder_stack(tape, self.params, "dec", x, memory, causal_mask(s), padding_mask(enc_valid),
                             c.dec_layers, c.heads, c.dropout, c.activation)

    def collate(self, examples: Sequence[Seq2SeqExample]):
        batch = encode_histories(self.catalog, [e.context for e in examples], [e.interactions for e in examples],
                                 [0] * len(examples), self.config.max_len, recencies=[e.recency for e in examples])
        width = max(len(e.item_ids) for e in examples) + 1
        tokens = np.full((len(examples), width), self.bos, dtype=np.int64)
        targets = np.zeros((len(examples), width), dtype=np.int64)
        mask = np.zeros((len(examples), width), dtype=bool)
        for r, e in enumerate(examples):
            if not e.item_ids:
                raise ValueError(f"outfit {e.outfit_id!r} has no items")
            idx = []
            for iid in e.item_ids:
                if not self.catalog.contains("item", iid):
                    raise KeyError(f"outfit {e.outfit_id!r}: unknown item {iid!r}")
                idx.append(self.catalog.index("item", iid))
            n = len(idx)
            tokens[r, 1:n + 1] = idx
            targets[r, :n] = idx
            targets[r, n] = self.eos
            mask[r, :n + 1] = True
        return batch, tokens, targets, mask

    def loss(self, tape: Tape, batch: InputBatch, tokens: np.ndarray, targets: np.ndarray,
             mask: np.ndarray) -> Tensor:
        """Teacher-forced cross-entropy over the masked decoder steps."""
        ents = self.embedder.entity_vectors(tape)
        mem = self.memory(tape, batch, ents)
        hidden = self.decode(tape, mem, batch.key_mask(), tokens, self.token_table(tape, ents))
        d = hidden.shape[-1]
        flat = tape.reshape(hidden, (-1, d))
        rows = np.flatnonzero(mask.reshape(-1))
        logits = tape.matmul(tape.embedding_lookup(flat, rows), tape.transpose(self.params["dec.out"], (1, 0)))
        return tape.softmax_cross_entropy(logits, targets.reshape(-1)[rows])

    def seq2seq_loss(self, context: UserContext | None, interactions: Sequence[Interaction],
                     outfit_item_ids: Sequence[str], reference_ts: int, tape: Tape | None = None) -> Tensor:
        tape = tape or Tape(record=False)
        rec = tuple(compute_recency(i.timestamp, reference_ts, self.embedding.recency_max)
                    for i in interactions[-self.config.max_len:])
        ex = Seq2SeqExample(context or UserContext(), tuple(interactions[-self.config.max_len:]), rec, "?",
                            tuple(outfit_item_ids))
        return self.loss(tape, *self.collate([ex]))

    def step_accuracy(self, examples: Sequence[Seq2SeqExample]) -> float:
        """Teacher-forced argmax accuracy over every decoder step, EOS included."""
        batch, tokens, targets, mask = self.collate(examples)
        tape = Tape(record=False)
        ents = self.embedder.entity_vectors(tape)
        hidden = self.decode(tape, self.memory(tape, batch, ents), batch.key_mask(), tokens,
                             self.token_table(tape, ents)).data
        pred = (hidden @ self.params["dec.out"].data.T).argmax(-1)
        return float((pred == targets)[mask].mean())

    # -- generation -------------------------------------------------------
    def generate(self, context: UserContext | None, interactions: Sequence[Interaction], reference_ts: int,
                 strategy: str = "greedy", temperature: float = 1.0, max_items: int = 8, min_items: int = 2,
                 seed: int = 0) -> GeneratedOutfit:
        """Autoregressive decoding without repeats.

        Already chosen items are masked; EOS is masked until ``min_items`` are
        chosen; decoding stops at EOS, ``max_items`` or an exhausted vocabulary.
        Reported probabilities come from the masked distribution actually
        sampled from.
        """
        if strategy not in ("greedy", "sample"):
            raise ValueError(f"unknown decoding strategy {strategy!r}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        max_items = min(max_items, self.config.max_items, self.n_items)
        min_items = min(min_items, max_items)
        rng = np.random.default_rng(seed)
        tape = Tape(record=False)
        batch = encode_histories(self.catalog, [context], [interactions], [reference_ts], self.config.max_len,
                                 self.embedding.recency_max)
        ents = self.embedder.entity_vectors(tape)
        mem = self.memory(tape, batch, ents)
        table = self.token_table(tape, ents)
        valid = batch.key_mask()
        out_table = self.params["dec.out"].data
        chosen: list[int] = []
        probs: list[float] = []
        while len(chosen) < max_items:
            tokens = np.array([[self.bos] + chosen], dtype=np.int64)
            h = self.decode(tape, mem, valid, tokens, table).data[0, -1]
            logits = (h @ out_table.T).astype(np.float64)
            logits[chosen] = -np.inf
            if len(chosen) < min_items:
                logits[self.eos] = -np.inf
            if not np.isfinite(logits).any():
                break
            if strategy == "greedy":
                p = softmax(logits)
                pick = int(np.argmax(logits))
            else:
                p = softmax(logits / temperature)
                pick = int(rng.choice(p.size, p=p))
            if pick == self.eos:
                break
            chosen.append(pick)
            probs.append(float(p[pick]))
        ids = self.catalog.ids("item")
        return GeneratedOutfit([ids[i] for i in chosen], probs)

    # -- persistence ------------------------------------------------------
    def config_dict(self) -> dict:
        return {"seq2seq": asdict(self.config), "embedding": self.embedding.to_dict(), "dtype": self.dtype.name,
                "catalog_fingerprint": self.catalog.fingerprint()}

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.kind, self.config_dict(), self.params, extra)

    @classmethod
    def load(cls, path: str | Path, catalog: Catalog) -> "Seq2SeqModel":
        meta, params = load_checkpoint(path, expect_kind=cls.kind)
        cfg = meta["config"]
        if cfg.get("catalog_fingerprint") != catalog.fingerprint():
            raise CheckpointError(f"{path}: checkpoint was trained on a different catalog")
        return cls(catalog, Seq2SeqConfig(**cfg["seq2seq"]), EmbeddingConfig(**cfg["embedding"]),
                   params=params, dtype=cfg.get("dtype", "float32"))


def train_seq2seq(examples: Sequence[Seq2SeqExample], catalog: Catalog, config: Seq2SeqConfig | None = None,
                  train: TrainConfig | None = None, dtype=np.float32,
                  checkpoint_path: str | Path | None = None) -> tuple[Seq2SeqModel, TrainResult]:
    train = train or TrainConfig()
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    config = config or Seq2SeqConfig()
    longest = max(len(e.item_ids) for e in examples)
    if longest > config.max_items:
        raise ValueError(f"outfit with {longest} items exceeds max_items={config.max_items}")
    model = Seq2SeqModel(catalog, config, seed=train.seed, dtype=dtype)
    lengths = [len(e.interactions) for e in examples]

    def loss_fn(tape, idx, rng):
        batch, tokens, targets, mask = model.collate([examples[i] for i in idx])
        return model.loss(tape, batch, tokens, targets, mask), float(mask.sum())

    def initial_loss():
        return float(model.loss(Tape(record=False), *model.collate(examples[:512])).data)

    result = fit(model.params, len(examples), lengths, loss_fn, train, initial_loss_fn=initial_loss)
    if checkpoint_path is not None:
        model.save(checkpoint_path, extra={"train": train.to_dict(), "loss_curve": result.loss_curve,
                                           "initial_loss": result.initial_loss})
    return model, result
