"""Per-use-case candidate pipeline: score, filter, freshness, diversify, explore, truncate.

Every stage after scoring is a pure function of its inputs plus an explicit
RNG, so a request with exploration off always produces the same list.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .datamodel import ENTITY_TYPES, Catalog, Interaction, UserContext

log = logging.getLogger(__name__)

FRESHNESS_MODES = ("off", "age_feature_toggle", "exp_decay")
DIVERSIFY_MODES = ("off", "mmr")
EXPLORE_MODES = ("off", "epsilon_greedy", "softmax_sample")
SCORING_MODELS = ("ranking", "fallback")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredCandidate:
    entity_id: str
    score: float
    age_days: int
    index: int  # row in the target vocabulary, also the similarity-vector row


@dataclass(frozen=True)
class UseCaseConfig:
    name: str = "default"
    target_entity_type: str = "outfit"
    allow_categories: tuple[int, ...] | None = None
    deny_categories: tuple[int, ...] = ()
    require_market: bool = False
    exclude_interacted: bool = False
    freshness: str = "off"
    decay: float = 0.1
    diversify: str = "off"
    alpha: float = 0.7
    explore: str = "off"
    epsilon: float = 0.1
    temperature: float = 1.0
    k: int = 10
    model: str = "ranking"

    def __post_init__(self):
        checks = [
            (self.model in SCORING_MODELS, f"model must be one of {SCORING_MODELS}"),
            (self.target_entity_type in ENTITY_TYPES, f"target_entity_type must be one of {ENTITY_TYPES}"),
            (self.freshness in FRESHNESS_MODES, f"freshness must be one of {FRESHNESS_MODES}"),
            (self.diversify in DIVERSIFY_MODES, f"diversify must be one of {DIVERSIFY_MODES}"),
            (self.explore in EXPLORE_MODES, f"explore must be one of {EXPLORE_MODES}"),
            (self.decay >= 0, "decay (lambda) must be >= 0"),
            (0 <= self.alpha <= 1, "alpha must lie in [0, 1]"),
            (0 <= self.epsilon <= 1, "epsilon must lie in [0, 1]"),
            (self.temperature > 0, "temperature must be > 0"),
            (isinstance(self.k, int) and self.k >= 1, "k must be an integer >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"use case {self.name!r}: {msg}")

    @classmethod
    def from_dict(cls, name: str, raw: dict) -> "UseCaseConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"use case {name!r}: unknown keys {unknown}")
        vals = dict(raw)
        for key in ("allow_categories", "deny_categories"):
            if vals.get(key) is not None:
                vals[key] = tuple(int(v) for v in vals[key])
        try:
            return cls(**{**vals, "name": name})
        except TypeError as exc:
            raise ConfigError(f"use case {name!r}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def with_k(self, k: int | None) -> "UseCaseConfig":
        if k is None:
            return self
        return UseCaseConfig(**{**asdict(self), "k": k})


@dataclass
class PipelineRequest:
    context: UserContext | None = None
    interactions: Sequence[Interaction] = ()
    reference_ts: int = 0


@dataclass
class PipelineResult:
    candidates: list[ScoredCandidate]
    filtered_all: bool = False
    stage_counts: dict[str, int] = field(default_factory=dict)


Scorer = Callable[[UserContext | None, Sequence[Interaction], int], np.ndarray]


def _ranked(cands: list[ScoredCandidate]) -> list[ScoredCandidate]:
    return sorted(cands, key=lambda c: (-c.score, c.entity_id))


def make_candidates(scores: np.ndarray, catalog: Catalog, entity_type: str) -> list[ScoredCandidate]:
    ids = catalog.ids(entity_type)
    if len(scores) != len(ids):
        raise ValueError(f"got {len(scores)} scores for {len(ids)} {entity_type} entities")
    out = []
    for n, (eid, s) in enumerate(zip(ids, scores)):
        s = float(s)
        if not math.isfinite(s) or s < 0:
            raise ValueError(f"score for {eid!r} must be finite and >= 0, got {s}")
        out.append(ScoredCandidate(eid, s, catalog.age_days(entity_type, eid), n))
    return _ranked(out)


# -- stages -----------------------------------------------------------------

def apply_filters(cands: list[ScoredCandidate], config: UseCaseConfig, catalog: Catalog,
                  request: PipelineRequest) -> list[ScoredCandidate]:
    """Conjunction of the configured predicates; order and scores untouched."""
    etype = config.target_entity_type
    allow = set(config.allow_categories) if config.allow_categories is not None else None
    deny = set(config.deny_categories)
    market = request.context.market if request.context is not None else None
    seen = {i.entity_id for i in request.interactions if i.entity_type == etype}

    def keep(c: ScoredCandidate) -> bool:
        if allow is not None or deny:
            cats = catalog.categories(etype, c.entity_id)
            if allow is not None and not cats & allow:
                return False
            if cats & deny:
                return False
        if config.require_market and market is not None:
            avail = catalog.markets(etype, c.entity_id)
            if avail is not None and market not in avail:
                return False
        if config.exclude_interacted and c.entity_id in seen:
            return False
        return True

    return [c for c in cands if keep(c)]


def rerank_freshness(cands: list[ScoredCandidate], mode: str, decay: float = 0.1) -> list[ScoredCandidate]:
    """exp_decay multiplies by exp(-decay * age_days) and re-sorts.

    ``age_feature_toggle`` is handled by the model (an age input feature), so
    it leaves scores alone here.
    """
    if mode in ("off", "age_feature_toggle"):
        return list(cands)
    if mode != "exp_decay":
        raise ConfigError(f"unknown freshness mode {mode!r}")
    return _ranked([ScoredCandidate(c.entity_id, c.score * math.exp(-decay * c.age_days), c.age_days, c.index)
                    for c in cands])


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors, dtype=np.float64), where=norms > 0)


def diversify(cands: list[ScoredCandidate], alpha: float, k: int, vectors: np.ndarray) -> list[ScoredCandidate]:
    """Greedy maximal marginal relevance over cosine similarity.

    Picks ``min(k, n)`` candidates by ``alpha * rel - (1 - alpha) * max_sim``
    with ``rel = score / max score``; ties go to the smaller entity id. The
    unpicked candidates follow in their incoming order so later stages still
    have a pool to draw from.
    """
    if not cands:
        return []
    unit = _unit_rows(np.asarray(vectors, dtype=np.float64))
    top = max(c.score for c in cands)
    rel = {c.entity_id: (c.score / top if top > 0 else 0.0) for c in cands}
    remaining = list(cands)
    picked: list[ScoredCandidate] = []
    max_sim = {c.entity_id: -math.inf for c in cands}

    def penalty(c):
        return max_sim[c.entity_id] if picked else 0.0

    while remaining and len(picked) < k:
        best = min(remaining, key=lambda c: (-(alpha * rel[c.entity_id] - (1 - alpha) * penalty(c)), c.entity_id))
        picked.append(best)
        remaining.remove(best)
        sims = unit[[c.index for c in remaining]] @ unit[best.index] if remaining else []
        for c, s in zip(remaining, sims):
            max_sim[c.entity_id] = max(max_sim[c.entity_id], float(s))
    return picked + remaining


def explore(cands: list[ScoredCandidate], mode: str, k: int, rng: np.random.Generator,
            epsilon: float = 0.1, temperature: float = 1.0) -> list[ScoredCandidate]:
    """Fill ``min(k, n)`` slots, then append the untouched rest.

    epsilon_greedy: per slot draw ``u = rng.random()``; if ``u < epsilon`` take
    ``rng.integers(len(pool))`` from the not-yet-placed pool (in ranked order),
    otherwise the best-ranked remaining candidate. softmax_sample: per slot draw
    ``u`` and invert the cumulative distribution of ``exp(score / T)`` over the
    pool, i.e. sampling without replacement.
    """
    if mode == "off" or not cands:
        return list(cands)
    pool = list(cands)
    out: list[ScoredCandidate] = []
    for _ in range(min(k, len(pool))):
        if mode == "epsilon_greedy":
            u = rng.random()
            j = int(rng.integers(len(pool))) if u < epsilon else 0
        elif mode == "softmax_sample":
            z = np.array([c.score for c in pool]) / temperature
            w = np.exp(z - z.max())
            cdf = np.cumsum(w / w.sum())
            j = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(pool) - 1)
        else:
            raise ConfigError(f"unknown exploration mode {mode!r}")
        out.append(pool.pop(j))
    return out + pool


# -- driver -----------------------------------------------------------------

def rerank(scores: np.ndarray, request: PipelineRequest, config: UseCaseConfig, catalog: Catalog,
           vectors: np.ndarray | None = None, seed: int | None = 0) -> PipelineResult:
    """Everything after scoring; ``vectors`` rows align with the target vocabulary."""
    counts = {}
    cands = make_candidates(scores, catalog, config.target_entity_type)
    counts["scored"] = len(cands)
    cands = apply_filters(cands, config, catalog, request)
    counts["filtered"] = len(cands)
    if not cands:
        log.info("use case %s: every candidate filtered out", config.name)
        return PipelineResult([], True, counts)
    cands = rerank_freshness(cands, config.freshness, config.decay)
    counts["freshness"] = len(cands)
    if config.diversify == "mmr":
        if vectors is None:
            raise ConfigError(f"use case {config.name!r}: mmr needs entity vectors")
        cands = diversify(cands, config.alpha, config.k, vectors)
    counts["diversified"] = len(cands)
    cands = explore(cands, config.explore, config.k, np.random.default_rng(seed), config.epsilon,
                    config.temperature)
    counts["explored"] = len(cands)
    cands = cands[:config.k]
    counts["returned"] = len(cands)
    log.debug("use case %s stage counts %s", config.name, counts)
    return PipelineResult(cands, False, counts)


def run_pipeline(request: PipelineRequest, config: UseCaseConfig, scorer: Scorer, catalog: Catalog,
                 vectors: np.ndarray | None = None, seed: int | None = 0) -> PipelineResult:
    scores = scorer(request.context, request.interactions, request.reference_ts)
    return rerank(np.asarray(scores), request, config, catalog, vectors, seed)


class ModelScorer:
    """Adapts a ranking or fallback model to the pipeline's scorer interface."""

    def __init__(self, model):
        self.model = model

    def __call__(self, context, interactions, reference_ts):
        return self.model.score_history(context, interactions, reference_ts)

    def target_vectors(self) -> np.ndarray:
        """Similarity space for MMR: the learned output embedding of each target.

        Rows of the output table place entities that are consumed in similar
        contexts close together, which is what diversification should spread.
        """
        return np.asarray(self.model.output_table.data, dtype=np.float64)


def validate_use_case(config: UseCaseConfig, model) -> None:
    """Check a use case against the model that will serve it."""
    if config.target_entity_type != model.encoder.target_entity_type:
        raise ConfigError(f"use case {config.name!r} targets {config.target_entity_type} entities but the model "
                          f"ranks {model.encoder.target_entity_type}")
    if config.freshness == "age_feature_toggle" and not model.embedding.use_age_feature:
        raise ConfigError(f"use case {config.name!r}: age_feature_toggle needs a model trained with the "
                          "age input feature (embedding.use_age_feature)")
