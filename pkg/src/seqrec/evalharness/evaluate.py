"""Leave-last-out split, ranking metrics and simple baselines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..datamodel import Catalog, Interaction, TrainingExample, UserContext, build_training_examples
from ..embedding import encode_histories
from ..pipeline import PipelineRequest, UseCaseConfig, rerank

KS = (5, 10, 20)
SEGMENTS = ("cold-start", "partial", "existing")


@dataclass
class HeldOut:
    user_id: str
    context: UserContext | None
    history: list[Interaction]
    target: Interaction

    @property
    def reference_ts(self) -> int:
        return self.target.timestamp


@dataclass
class Split:
    train: dict[str, list[Interaction]]
    heldout: list[HeldOut]
    excluded: int = 0
    target_entity_type: str = "outfit"

    @property
    def train_reference_ts(self) -> int:
        return max((s[-1].timestamp for s in self.train.values() if s), default=0)


def leave_last_out(sequences: Mapping[str, Sequence[Interaction]], contexts: Mapping[str, UserContext],
                   target_entity_type: str = "outfit") -> Split:
    """Hold out each user's final target-type interaction; training keeps what came before it."""
    train, heldout, excluded = {}, [], 0
    for uid in sorted(sequences):
        seq = list(sequences[uid])
        last = max((n for n, i in enumerate(seq) if i.entity_type == target_entity_type), default=None)
        if last is None:
            excluded += 1
            train[uid] = seq
            continue
        train[uid] = seq[:last]
        heldout.append(HeldOut(uid, contexts.get(uid), seq[:last], seq[last]))
    return Split(train, heldout, excluded, target_entity_type)


def segment_of(history: Sequence[Interaction], target_entity_type: str) -> str:
    if not history:
        return "cold-start"
    if any(i.entity_type == target_entity_type for i in history):
        return "existing"
    return "partial"


def training_examples(split: Split, contexts: Mapping[str, UserContext], catalog: Catalog, max_len: int,
                      reference_ts: int | None = None) -> list[TrainingExample]:
    ref = split.train_reference_ts if reference_ts is None else reference_ts
    out = []
    for uid in sorted(split.train):
        out += build_training_examples(split.train[uid], contexts.get(uid), split.target_entity_type, max_len,
                                       ref, catalog)
    return out


# -- rankers ----------------------------------------------------------------
# A ranker maps a batch of held-out users to a ranked list of target indices.
Ranker = Callable[[Sequence[HeldOut], int], list[list[int]]]


def top_k_indices(scores: np.ndarray, k: int, tie_rank: np.ndarray) -> list[list[int]]:
    """Rows sorted by score descending; ties by ``tie_rank`` (rank of the entity id)."""
    out = []
    for row in np.atleast_2d(scores):
        order = np.lexsort((tie_rank, -row))
        out.append(order[:k].tolist())
    return out


def _tie_rank(catalog: Catalog, etype: str) -> np.ndarray:
    ids = catalog.ids(etype)
    return np.argsort(np.argsort(np.array(ids), kind="stable"), kind="stable")


def model_ranker(model, batch_size: int = 256) -> Ranker:
    """Scores through the shared feature code, exactly as the service does."""
    cat, etype = model.catalog, model.encoder.target_entity_type
    tie = _tie_rank(cat, etype)
    max_len = model.encoder.max_len

    def rank(users: Sequence[HeldOut], k: int) -> list[list[int]]:
        out = []
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            batch = encode_histories(cat, [u.context for u in chunk], [u.history for u in chunk],
                                     [u.reference_ts for u in chunk], max_len, model.embedding.recency_max)
            out += top_k_indices(model.logits(batch), k, tie)
        return out

    return rank


def popularity_baseline(train: Mapping[str, Sequence[Interaction]], catalog: Catalog,
                        target_entity_type: str = "outfit") -> Ranker:
    counts = np.zeros(catalog.count(target_entity_type))
    for seq in train.values():
        for i in seq:
            if i.entity_type == target_entity_type:
                counts[catalog.index(target_entity_type, i.entity_id)] += 1
    top = top_k_indices(counts, len(counts), _tie_rank(catalog, target_entity_type))[0]

    def rank(users, k):
        return [top[:k] for _ in users]

    rank.counts = counts
    return rank


def random_baseline(catalog: Catalog, target_entity_type: str = "outfit", seed: int = 0) -> Ranker:
    n = catalog.count(target_entity_type)

    def rank(users, k):
        rng = np.random.default_rng(seed)
        return [rng.permutation(n)[:k].tolist() for _ in users]

    return rank


def oracle_ranker(catalog: Catalog, target_entity_type: str = "outfit") -> Ranker:
    n = catalog.count(target_entity_type)

    def rank(users, k):
        out = []
        for u in users:
            t = catalog.index(target_entity_type, u.target.entity_id)
            out.append([t] + [i for i in range(n) if i != t][:k - 1])
        return out

    return rank


def pipeline_ranker(model, config: UseCaseConfig, seed: int = 0) -> Ranker:
    """Full scoring + re-ranking chain for every user."""
    from ..pipeline import ModelScorer

    scorer = ModelScorer(model)
    vectors = scorer.target_vectors()
    cat = model.catalog
    max_len = model.encoder.max_len

    def rank(users, k):
        cfg = config.with_k(k)
        out = []
        for start in range(0, len(users), 256):
            chunk = users[start:start + 256]
            batch = encode_histories(cat, [u.context for u in chunk], [u.history for u in chunk],
                                     [u.reference_ts for u in chunk], max_len, model.embedding.recency_max)
            probs = model.score_batch(batch)
            for u, p in zip(chunk, probs):
                res = rerank(p, PipelineRequest(u.context, u.history, u.reference_ts), cfg, cat, vectors, seed)
                out.append([c.index for c in res.candidates])
        return out

    return rank


# -- metrics ----------------------------------------------------------------

@dataclass
class EvalReport:
    ks: tuple[int, ...]
    overall: dict[str, float]
    segments: dict[str, dict[str, float]]
    n_users: int
    segment_sizes: dict[str, int]
    excluded: int = 0
    catalog_size: int = 0
    extra: dict = field(default_factory=dict)

    def recall(self, k: int, segment: str | None = None) -> float:
        return (self.segments[segment] if segment else self.overall)[f"recall@{k}"]

    def to_dict(self) -> dict:
        return {"ks": list(self.ks), "overall": self.overall, "segments": self.segments, "n_users": self.n_users,
                "segment_sizes": self.segment_sizes, "excluded": self.excluded,
                "catalog_size": self.catalog_size, **({"extra": self.extra} if self.extra else {})}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _metrics(ranked: list[list[int]], targets: list[int], ks, n_catalog) -> dict[str, float]:
    out = {}
    n = len(targets)
    for k in ks:
        hits, gain, seen = 0, 0.0, set()
        for lst, t in zip(ranked, targets):
            top = lst[:k]
            seen.update(top)
            if t in top:
                hits += 1
                gain += 1.0 / math.log2(top.index(t) + 2)
        out[f"recall@{k}"] = hits / n if n else 0.0
        out[f"ndcg@{k}"] = gain / n if n else 0.0
        out[f"coverage@{k}"] = len(seen) / n_catalog if n_catalog else 0.0
    return out


def evaluate(ranker: Ranker, split: Split, catalog: Catalog, ks: Sequence[int] = KS) -> EvalReport:
    """Recall, NDCG (binary relevance) and coverage at each k, overall and per segment."""
    ks = tuple(sorted(ks))
    etype = split.target_entity_type
    users = split.heldout
    ranked = ranker(users, max(ks))
    targets = [catalog.index(etype, u.target.entity_id) for u in users]
    n_catalog = catalog.count(etype)
    seg = [segment_of(u.history, etype) for u in users]
    segments, sizes = {}, {}
    for name in SEGMENTS:
        idx = [n for n, s in enumerate(seg) if s == name]
        sizes[name] = len(idx)
        segments[name] = _metrics([ranked[n] for n in idx], [targets[n] for n in idx], ks, n_catalog)
    return EvalReport(ks, _metrics(ranked, targets, ks, n_catalog), segments, len(users), sizes,
                      split.excluded, n_catalog)
