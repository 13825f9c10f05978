"""Per-position input vectors built from heterogeneous entity features.

An entity vector is the concatenation ``[category | color | brand |
price_bucket | creator]`` (plus an ``age`` block when enabled). Outfits and
creators average each feature block over their member items; a feature an
item lacks contributes a zero block to that average.

Each interaction row is ``[entity vector | one-hot interaction type |
recency embedding]`` multiplied by a learned projection. Row 0 of every
sequence holds the user context.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import (
    CONTEXT_FEATURES,
    INTERACTION_TYPES,
    ITEM_FEATURES,
    RECENCY_MAX,
    Catalog,
    Interaction,
    UserContext,
    compute_recency,
)
from .numerics import Tape, Tensor

ENTITY_BLOCKS = ITEM_FEATURES + ("creator",)


@dataclass
class EmbeddingConfig:
    feature_dim: int = 16
    recency_dim: int = 8
    recency_max: int = RECENCY_MAX
    d_model: int = 64
    max_len: int = 50
    use_age_feature: bool = False
    age_dim: int = 8
    age_buckets: int = 16
    age_bucket_days: int = 7
    vocab_sizes: dict[str, int] = field(default_factory=dict)
    n_creators: int = 0

    @property
    def n_blocks(self) -> int:
        return len(ENTITY_BLOCKS) + (1 if self.use_age_feature else 0)

    @property
    def entity_width(self) -> int:
        return len(ENTITY_BLOCKS) * self.feature_dim + (self.age_dim if self.use_age_feature else 0)

    @property
    def concat_width(self) -> int:
        return self.entity_width + len(INTERACTION_TYPES) + self.recency_dim

    def to_dict(self) -> dict:
        return asdict(self)


def config_for_catalog(catalog: Catalog, **overrides) -> EmbeddingConfig:
    vs = dict(catalog.vocab_sizes)
    for f in CONTEXT_FEATURES:
        vs.setdefault(f, 1)
    return EmbeddingConfig(vocab_sizes=vs, n_creators=catalog.count("creator"), **overrides)


class EntityFeatureIndex:
    """Constant averaging weights from every entity to every feature value.

    ``weights[f][e, v]`` is the share of entity ``e``'s member items having
    value ``v`` for feature ``f``; the product with the feature table is the
    per-feature average.
    """

    def __init__(self, catalog: Catalog, config: EmbeddingConfig, dtype=np.float64):
        n = catalog.n_entities
        sizes = dict(config.vocab_sizes)
        sizes["creator"] = max(config.n_creators, 1)
        if config.use_age_feature:
            sizes["age"] = config.age_buckets
        self.sizes = sizes
        self.weights = {f: np.zeros((n, sizes[f]), dtype=dtype) for f in sizes if f in ENTITY_BLOCKS or f == "age"}
        for etype in ("item", "outfit", "creator"):
            for eid in catalog.ids(etype):
                row = catalog.global_index(etype, eid)
                members = catalog.member_items(etype, eid)
                share = 1.0 / len(members)
                for iid in members:
                    it = catalog.items[iid]
                    for f in ITEM_FEATURES:
                        v = it.feature(f)
                        if v is not None:
                            self.weights[f][row, v] += share
                if etype == "outfit":
                    cid = catalog.outfits[eid].creator_id
                    if cid is not None:
                        self.weights["creator"][row, catalog.index("creator", cid)] = 1.0
                elif etype == "creator":
                    self.weights["creator"][row, catalog.index("creator", eid)] = 1.0
                if config.use_age_feature:
                    bucket = min(catalog.age_days(etype, eid) // config.age_bucket_days, config.age_buckets - 1)
                    self.weights["age"][row, bucket] = 1.0
        self.n_entities = n


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def init_embedding_params(config: EmbeddingConfig, rng: np.random.Generator,
                          dtype=np.float64, prefix: str = "emb") -> dict[str, Tensor]:
    fd, d = config.feature_dim, config.d_model
    p: dict[str, Tensor] = {}
    for f in ITEM_FEATURES:
        p[f"{prefix}.{f}"] = _normal(rng, (config.vocab_sizes[f], fd), 0.1, dtype)
    p[f"{prefix}.creator"] = _normal(rng, (max(config.n_creators, 1), fd), 0.1, dtype)
    if config.use_age_feature:
        p[f"{prefix}.age"] = _normal(rng, (config.age_buckets, config.age_dim), 0.1, dtype)
    p[f"{prefix}.recency"] = _normal(rng, (config.recency_max + 1, config.recency_dim), 0.1, dtype)
    for f in CONTEXT_FEATURES:
        p[f"{prefix}.ctx.{f}"] = _normal(rng, (config.vocab_sizes.get(f, 1), fd), 0.1, dtype)
    p[f"{prefix}.proj"] = _normal(rng, (config.concat_width, d), 1.0 / np.sqrt(config.concat_width), dtype)
    p[f"{prefix}.ctx_proj"] = _normal(rng, (fd, d), 1.0 / np.sqrt(fd), dtype)
    p[f"{prefix}.pos"] = _normal(rng, (config.max_len + 1, d), 0.02, dtype)
    for name, t in p.items():
        t.name = name
    return p


@dataclass
class InputBatch:
    """Raw-id sequences turned into index arrays, right-padded.

    ``entity`` holds global entity indices; padding slots reuse index 0 and
    sit after every real row, so causal attention never reaches them.
    """

    entity: np.ndarray      # (B, L) int
    itype: np.ndarray       # (B, L) int
    recency: np.ndarray     # (B, L) int
    context: np.ndarray     # (B, n_context_features) int, -1 = missing
    lengths: np.ndarray     # (B,) real interactions per row

    @property
    def rows(self) -> int:
        return self.entity.shape[1] + 1

    def key_mask(self) -> np.ndarray:
        """(B, rows) True where a row is real (context or interaction)."""
        t = np.arange(self.rows)[None, :]
        return t <= self.lengths[:, None]


def encode_histories(catalog: Catalog, contexts: Sequence[UserContext | None],
                     histories: Sequence[Sequence[Interaction]], reference_ts: Sequence[int],
                     max_len: int, recency_max: int = RECENCY_MAX,
                     recencies: Sequence[Sequence[int]] | None = None) -> InputBatch:
    """Shared feature construction for training, evaluation and serving.

    Histories longer than ``max_len`` keep their most recent interactions.
    """
    b = len(histories)
    trimmed = [list(h)[-max_len:] if max_len > 0 else [] for h in histories]
    width = max((len(h) for h in trimmed), default=0)
    entity = np.zeros((b, width), dtype=np.int64)
    itype = np.zeros((b, width), dtype=np.int64)
    recency = np.zeros((b, width), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    ctx = np.full((b, len(CONTEXT_FEATURES)), -1, dtype=np.int64)
    type_index = {t: i for i, t in enumerate(INTERACTION_TYPES)}
    for r, hist in enumerate(trimmed):
        lengths[r] = len(hist)
        for c, inter in enumerate(hist):
            entity[r, c] = catalog.global_index(inter.entity_type, inter.entity_id)
            itype[r, c] = type_index[inter.interaction_type]
        if recencies is not None:
            rec = list(recencies[r])[-len(hist):] if hist else []
            recency[r, :len(hist)] = rec
        else:
            recency[r, :len(hist)] = [compute_recency(i.timestamp, reference_ts[r], recency_max) for i in hist]
        cx = contexts[r]
        if cx is not None:
            ctx[r] = [-1 if v is None else v for v in cx.values()]
    return InputBatch(entity, itype, recency, ctx, lengths)


class Embedder:
    """Composes model inputs from the catalog and the learned tables."""

    def __init__(self, config: EmbeddingConfig, catalog: Catalog, params: dict[str, Tensor],
                 prefix: str = "emb", dtype=np.float64):
        self.config = config
        self.catalog = catalog
        self.params = params
        self.prefix = prefix
        self.index = EntityFeatureIndex(catalog, config, dtype=dtype)
        self._onehot = np.eye(len(INTERACTION_TYPES), dtype=dtype)

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def entity_vectors(self, tape: Tape) -> Tensor:
        """(n_entities, entity_width) composite vectors for the whole catalog."""
        blocks = [tape.matmul(self.index.weights[f], self._p(f)) for f in ENTITY_BLOCKS]
        if self.config.use_age_feature:
            blocks.append(tape.matmul(self.index.weights["age"], self._p("age")))
        return tape.concat(blocks, axis=-1)

    def embed_entity(self, entity_type: str, entity_id: str, tape: Tape | None = None) -> np.ndarray:
        tape = tape or Tape(record=False)
        row = self.catalog.global_index(entity_type, entity_id)
        return self.entity_vectors(tape).data[row]

    def block_slices(self) -> dict[str, slice]:
        fd = self.config.feature_dim
        out = {f: slice(k * fd, (k + 1) * fd) for k, f in enumerate(ENTITY_BLOCKS)}
        if self.config.use_age_feature:
            start = len(ENTITY_BLOCKS) * fd
            out["age"] = slice(start, start + self.config.age_dim)
        return out

    def interaction_features(self, tape: Tape, entity_vecs: Tensor, itype: np.ndarray,
                             recency: np.ndarray) -> Tensor:
        """Pre-projection rows ``[entity | one-hot type | recency]``."""
        if np.any(recency > self.config.recency_max) or np.any(recency < 0):
            raise ValueError(f"recency bucket outside [0, {self.config.recency_max}]")
        onehot = self._onehot[itype].astype(entity_vecs.dtype)
        rec = tape.embedding_lookup(self._p("recency"), recency)
        return tape.concat([entity_vecs, onehot, rec], axis=-1)

    def embed_interaction(self, tape: Tape, entity_vecs: Tensor, itype: np.ndarray,
                          recency: np.ndarray) -> Tensor:
        return tape.matmul(self.interaction_features(tape, entity_vecs, itype, recency), self._p("proj"))

    def context_embedding(self, tape: Tape, ctx: np.ndarray) -> Tensor:
        """(B, d_model) projected sum of the present context feature embeddings."""
        total = None
        for k, f in enumerate(CONTEXT_FEATURES):
            col = ctx[:, k]
            present = (col >= 0).astype(self._p("ctx_proj").dtype)[:, None]
            emb = tape.embedding_lookup(self._p(f"ctx.{f}"), np.maximum(col, 0))
            emb = tape.multiply(emb, present)
            total = emb if total is None else tape.add(total, emb)
        return tape.matmul(total, self._p("ctx_proj"))

    def model_input(self, tape: Tape, batch: InputBatch, entity_vecs: Tensor | None = None) -> Tensor:
        """(B, L+1, d_model): context row, then one row per interaction, plus positions."""
        b, length = batch.entity.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence of {length} interactions exceeds max_len={self.config.max_len}")
        d = self.config.d_model
        ctx_row = tape.reshape(self.context_embedding(tape, batch.context), (b, 1, d))
        if length:
            table = entity_vecs if entity_vecs is not None else self.entity_vectors(tape)
            ent = tape.embedding_lookup(table, batch.entity)
            rows = tape.concat([ctx_row, self.embed_interaction(tape, ent, batch.itype, batch.recency)], axis=1)
        else:
            rows = ctx_row
        pos = tape.embedding_lookup(self._p("pos"), np.arange(length + 1))
        return tape.add(rows, pos)

    def build_model_input(self, context: UserContext | None, interactions: Sequence[Interaction],
                          reference_ts: int) -> np.ndarray:
        """Single-user (L+1, d_model) input matrix, no gradient recording."""
        batch = encode_histories(self.catalog, [context], [interactions], [reference_ts],
                                 self.config.max_len, self.config.recency_max)
        return self.model_input(Tape(record=False), batch).data[0]
