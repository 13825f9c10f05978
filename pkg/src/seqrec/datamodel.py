"""Entity catalog, interaction logs, recency and masked training windows."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

ENTITY_TYPES = ("item", "outfit", "creator")
INTERACTION_TYPES = ("click", "wishlist", "purchase")
ITEM_FEATURES = ("category", "color", "brand", "price_bucket")
CONTEXT_FEATURES = ("market", "device", "gender_intent")
SECONDS_PER_DAY = 86400
RECENCY_MAX = 30


class CatalogError(ValueError):
    """Invalid catalog: duplicate ids, dangling references, bad feature values."""


class InteractionFormatError(ValueError):
    """A malformed line in an interactions or contexts file."""


@dataclass(frozen=True)
class Item:
    id: str
    category: int | None = None
    color: int | None = None
    brand: int | None = None
    price_bucket: int | None = None
    age_days: int = 0
    markets: tuple[int, ...] | None = None

    def feature(self, name: str) -> int | None:
        return getattr(self, name)


@dataclass(frozen=True)
class Outfit:
    id: str
    item_ids: tuple[str, ...]
    creator_id: str | None = None
    age_days: int = 0
    markets: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Creator:
    id: str
    outfit_ids: tuple[str, ...]


@dataclass(frozen=True)
class Interaction:
    user_id: str
    timestamp: int
    entity_type: str
    entity_id: str
    interaction_type: str


@dataclass(frozen=True)
class UserContext:
    user_id: str | None = None
    market: int | None = None
    device: int | None = None
    gender_intent: int | None = None

    def values(self) -> tuple[int | None, ...]:
        return tuple(getattr(self, f) for f in CONTEXT_FEATURES)


@dataclass(frozen=True)
class TrainingExample:
    """One window of a user's history.

    ``target_ids[p]`` / ``target_mask[p]`` describe what model row ``p``
    predicts: row 0 is the context row and row ``p`` (p >= 1) holds
    ``interactions[p-1]``, so row ``p`` predicts ``interactions[p]``.
    ``target_ids`` index the target vocabulary; -1 where the mask is off.
    """

    context: UserContext
    interactions: tuple[Interaction, ...]
    recency: tuple[int, ...]
    target_ids: tuple[int, ...]
    target_mask: tuple[bool, ...]


class Catalog:
    """Immutable, cross-referenced entity catalog.

    Each entity type has a dense index (file order). ``global_index`` lays the
    types out back to back: items, then outfits, then creators.
    """

    def __init__(self, items: Sequence[Item], outfits: Sequence[Outfit], creators: Sequence[Creator],
                 vocab_sizes: dict[str, int] | None = None):
        self.items: dict[str, Item] = _unique("item", items)
        self.outfits: dict[str, Outfit] = _unique("outfit", outfits)
        self.creators: dict[str, Creator] = _unique("creator", creators)
        self._index = {
            "item": {k: i for i, k in enumerate(self.items)},
            "outfit": {k: i for i, k in enumerate(self.outfits)},
            "creator": {k: i for i, k in enumerate(self.creators)},
        }
        self._ids = {t: list(m) for t, m in self._index.items()}
        self._offset = {"item": 0, "outfit": len(self.items), "creator": len(self.items) + len(self.outfits)}
        self.vocab_sizes = self._validate(vocab_sizes or {})

    # -- validation -------------------------------------------------------
    def _validate(self, declared: dict[str, int]) -> dict[str, int]:
        sizes = {}
        for f in ITEM_FEATURES:
            seen = [it.feature(f) for it in self.items.values() if it.feature(f) is not None]
            for it in self.items.values():
                v = it.feature(f)
                if v is None:
                    continue
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise CatalogError(f"item {it.id!r}: unknown value {v!r} for feature {f!r}")
                if f in declared and v >= declared[f]:
                    raise CatalogError(f"item {it.id!r}: {f}={v} outside vocabulary of size {declared[f]}")
            sizes[f] = int(declared.get(f, max(seen, default=-1) + 1)) or 1
        for f in CONTEXT_FEATURES:
            if f in declared:
                sizes[f] = int(declared[f])
        for it in self.items.values():
            if it.age_days < 0:
                raise CatalogError(f"item {it.id!r}: negative age_days")
        for o in self.outfits.values():
            if not o.item_ids:
                raise CatalogError(f"outfit {o.id!r}: empty item list")
            if len(set(o.item_ids)) != len(o.item_ids):
                raise CatalogError(f"outfit {o.id!r}: duplicate item ids")
            for iid in o.item_ids:
                if iid not in self.items:
                    raise CatalogError(f"outfit {o.id!r}: references missing item {iid!r}")
            if o.creator_id is not None and o.creator_id not in self.creators:
                raise CatalogError(f"outfit {o.id!r}: references missing creator {o.creator_id!r}")
            if o.age_days < 0:
                raise CatalogError(f"outfit {o.id!r}: negative age_days")
        for c in self.creators.values():
            if not c.outfit_ids:
                raise CatalogError(f"creator {c.id!r}: empty outfit list")
            for oid in c.outfit_ids:
                if oid not in self.outfits:
                    raise CatalogError(f"creator {c.id!r}: references missing outfit {oid!r}")
        return sizes

    # -- lookups ----------------------------------------------------------
    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.items), len(self.outfits), len(self.creators)

    @property
    def n_entities(self) -> int:
        return sum(self.sizes)

    def count(self, entity_type: str) -> int:
        return len(self._ids[entity_type])

    def ids(self, entity_type: str) -> list[str]:
        return self._ids[entity_type]

    def contains(self, entity_type: str, entity_id: str) -> bool:
        return entity_type in self._index and entity_id in self._index[entity_type]

    def index(self, entity_type: str, entity_id: str) -> int:
        try:
            return self._index[entity_type][entity_id]
        except KeyError:
            raise KeyError(f"unknown {entity_type} {entity_id!r}") from None

    def global_index(self, entity_type: str, entity_id: str) -> int:
        return self._offset[entity_type] + self.index(entity_type, entity_id)

    def offset(self, entity_type: str) -> int:
        return self._offset[entity_type]

    def get(self, entity_type: str, entity_id: str) -> Item | Outfit | Creator:
        table = {"item": self.items, "outfit": self.outfits, "creator": self.creators}[entity_type]
        return table[entity_id]

    def member_items(self, entity_type: str, entity_id: str) -> list[str]:
        """Items an entity stands for: itself, its outfit members, or all items of a creator's outfits."""
        if entity_type == "item":
            self.index("item", entity_id)
            return [entity_id]
        if entity_type == "outfit":
            return list(self.outfits[entity_id].item_ids)
        if entity_type == "creator":
            return [i for oid in self.creators[entity_id].outfit_ids for i in self.outfits[oid].item_ids]
        raise KeyError(f"unknown entity type {entity_type!r}")

    def age_days(self, entity_type: str, entity_id: str) -> int:
        if entity_type == "creator":
            return min(self.outfits[o].age_days for o in self.creators[entity_id].outfit_ids)
        return self.get(entity_type, entity_id).age_days

    def markets(self, entity_type: str, entity_id: str) -> tuple[int, ...] | None:
        if entity_type == "creator":
            return None
        return self.get(entity_type, entity_id).markets

    def categories(self, entity_type: str, entity_id: str) -> set[int]:
        return {self.items[i].category for i in self.member_items(entity_type, entity_id)
                if self.items[i].category is not None}

    # -- serialization ----------------------------------------------------
    def canonical(self) -> dict:
        def item_rec(it: Item):
            rec = {"id": it.id, **{f: it.feature(f) for f in ITEM_FEATURES}, "age_days": it.age_days}
            if it.markets is not None:
                rec["markets"] = list(it.markets)
            return rec

        def outfit_rec(o: Outfit):
            rec = {"id": o.id, "item_ids": list(o.item_ids), "age_days": o.age_days}
            if o.creator_id is not None:
                rec["creator_id"] = o.creator_id
            if o.markets is not None:
                rec["markets"] = list(o.markets)
            return rec

        return {
            "items": [item_rec(i) for i in self.items.values()],
            "outfits": [outfit_rec(o) for o in self.outfits.values()],
            "creators": [{"id": c.id, "outfit_ids": list(c.outfit_ids)} for c in self.creators.values()],
            "vocab_sizes": dict(sorted(self.vocab_sizes.items())),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        canon = self.canonical()
        for name in ("items", "outfits", "creators"):
            _write_jsonl(d / f"{name}.jsonl", canon[name])
        (d / "vocab.json").write_text(json.dumps(canon["vocab_sizes"], sort_keys=True, indent=1) + "\n")


def _unique(kind: str, records: Iterable) -> dict:
    out = {}
    for r in records:
        if r.id in out:
            raise CatalogError(f"duplicate {kind} id {r.id!r}")
        out[r.id] = r
    return out


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def _read_jsonl(path: str | Path, error_cls) -> list[tuple[int, dict]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise error_cls(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise error_cls(f"{path}:{lineno}: expected a JSON object")
            rows.append((lineno, rec))
    return rows


def _markets(v):
    return None if v is None else tuple(int(m) for m in v)


def load_catalog(item_path: str | Path, outfit_path: str | Path, creator_path: str | Path | None = None,
                 vocab_sizes: dict[str, int] | None = None) -> Catalog:
    """Read the three catalog files and validate cross references.

    ``vocab_sizes`` bounds feature indices; when omitted it is read from a
    ``vocab.json`` next to the items file if present, else inferred.
    """
    if vocab_sizes is None:
        vpath = Path(item_path).with_name("vocab.json")
        if vpath.exists():
            vocab_sizes = json.loads(vpath.read_text())
    items = []
    for lineno, r in _read_jsonl(item_path, CatalogError):
        try:
            items.append(Item(id=str(r["id"]), **{f: r.get(f) for f in ITEM_FEATURES},
                              age_days=int(r.get("age_days", 0)), markets=_markets(r.get("markets"))))
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"{item_path}:{lineno}: bad item record ({exc})") from None
    outfits = []
    for lineno, r in _read_jsonl(outfit_path, CatalogError):
        try:
            cid = r.get("creator_id")
            outfits.append(Outfit(id=str(r["id"]), item_ids=tuple(str(i) for i in r["item_ids"]),
                                  creator_id=None if cid is None else str(cid),
                                  age_days=int(r.get("age_days", 0)), markets=_markets(r.get("markets"))))
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"{outfit_path}:{lineno}: bad outfit record ({exc})") from None
    creators = []
    if creator_path is not None and Path(creator_path).exists():
        for lineno, r in _read_jsonl(creator_path, CatalogError):
            try:
                creators.append(Creator(id=str(r["id"]), outfit_ids=tuple(str(o) for o in r["outfit_ids"])))
            except (KeyError, TypeError) as exc:
                raise CatalogError(f"{creator_path}:{lineno}: bad creator record ({exc})") from None
    return Catalog(items, outfits, creators, vocab_sizes)


def load_catalog_dir(directory: str | Path) -> Catalog:
    d = Path(directory)
    return load_catalog(d / "items.jsonl", d / "outfits.jsonl", d / "creators.jsonl")


@dataclass
class InteractionLog:
    sequences: dict[str, list[Interaction]]
    rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(s) for s in self.sequences.values())


def parse_interaction(rec: dict) -> Interaction:
    """Validate one interaction record; raises ValueError on schema problems."""
    ts = rec["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
        raise ValueError(f"timestamp must be a positive integer, got {ts!r}")
    etype = rec["entity_type"]
    if etype not in ENTITY_TYPES:
        raise ValueError(f"unknown entity_type {etype!r}")
    itype = rec["interaction_type"]
    if itype not in INTERACTION_TYPES:
        raise ValueError(f"unknown interaction_type {itype!r}")
    return Interaction(user_id=str(rec.get("user_id", "")), timestamp=ts, entity_type=etype,
                       entity_id=str(rec["entity_id"]), interaction_type=itype)


def load_interactions(path: str | Path, catalog: Catalog) -> InteractionLog:
    """Per-user chronological sequences; unresolvable entities are counted and skipped."""
    sequences: dict[str, list[Interaction]] = {}
    rejected: list[int] = []
    for lineno, rec in _read_jsonl(path, InteractionFormatError):
        try:
            inter = parse_interaction(rec)
            if "user_id" not in rec:
                raise KeyError("user_id")
        except (KeyError, ValueError, TypeError) as exc:
            raise InteractionFormatError(f"{path}:{lineno}: {exc}") from None
        if not catalog.contains(inter.entity_type, inter.entity_id):
            rejected.append(lineno)
            continue
        sequences.setdefault(inter.user_id, []).append(inter)
    for seq in sequences.values():
        seq.sort(key=lambda x: x.timestamp)  # stable: file order on ties
    if rejected:
        log.warning("rejected %d interaction records with unknown entities", len(rejected))
    return InteractionLog(sequences, len(rejected), rejected)


def load_contexts(path: str | Path, vocab_sizes: dict[str, int] | None = None) -> dict[str, UserContext]:
    out = {}
    if not Path(path).exists():
        return out
    for lineno, rec in _read_jsonl(path, InteractionFormatError):
        try:
            vals = {f: rec.get(f) for f in CONTEXT_FEATURES}
            for f, v in vals.items():
                if v is None:
                    continue
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise ValueError(f"bad {f} value {v!r}")
                if vocab_sizes and f in vocab_sizes and v >= vocab_sizes[f]:
                    raise ValueError(f"{f}={v} outside vocabulary of size {vocab_sizes[f]}")
            out[str(rec["user_id"])] = UserContext(user_id=str(rec["user_id"]), **vals)
        except (KeyError, ValueError) as exc:
            raise InteractionFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_interactions(path: str | Path, sequences: dict[str, list[Interaction]]) -> None:
    rows = sorted((i for s in sequences.values() for i in s), key=lambda i: (i.timestamp, i.user_id))
    _write_jsonl(Path(path), ({"user_id": i.user_id, "timestamp": i.timestamp, "entity_type": i.entity_type,
                               "entity_id": i.entity_id, "interaction_type": i.interaction_type} for i in rows))


def compute_recency(action_ts: int, reference_ts: int, recency_max: int = RECENCY_MAX) -> int:
    """Whole days between an action and the reference time, clipped to ``recency_max``."""
    if reference_ts < action_ts:
        raise ValueError(f"reference time {reference_ts} precedes action time {action_ts}")
    return min(int((reference_ts - action_ts) // SECONDS_PER_DAY), recency_max)


def window_bounds(n: int, max_len: int, stride: int | None = None) -> list[tuple[int, int]]:
    """Half-open windows of length <= max_len; consecutive starts ``stride`` apart, last one flush with the end."""
    if n <= 0:
        return []
    if n <= max_len:
        return [(0, n)]
    stride = stride or max(1, max_len // 2)
    bounds = []
    start = 0
    while start + max_len < n:
        bounds.append((start, start + max_len))
        start += stride
    bounds.append((n - max_len, n))
    return bounds


def build_training_examples(sequence: Sequence[Interaction], context: UserContext | None,
                            target_entity_type: str, max_len: int, reference_ts: int,
                            catalog: Catalog, stride: int | None = None,
                            target_interaction_types: Iterable[str] | None = None,
                            recency_max: int = RECENCY_MAX) -> list[TrainingExample]:
    """Sliding windows with a per-row target mask.

    The context row predicts the first interaction only in the window that
    starts the sequence; later windows begin mid-history.
    """
    context = context or UserContext()
    eligible = set(target_interaction_types) if target_interaction_types else None
    examples = []
    for a, b in window_bounds(len(sequence), max_len, stride):
        window = tuple(sequence[a:b])
        target_ids, mask = [], []
        for p, inter in enumerate(window):
            is_target = inter.entity_type == target_entity_type and (
                eligible is None or inter.interaction_type in eligible)
            if p == 0 and a > 0:
                is_target = False
            mask.append(is_target)
            target_ids.append(catalog.index(target_entity_type, inter.entity_id) if is_target else -1)
        if not any(mask):
            continue
        recency = tuple(compute_recency(i.timestamp, reference_ts, recency_max) for i in window)
        examples.append(TrainingExample(context, window, recency, tuple(target_ids), tuple(mask)))
    return examples
