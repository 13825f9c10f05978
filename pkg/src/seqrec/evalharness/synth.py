"""Synthetic fashion-like data with planted style structure.

Every item, outfit and creator belongs to one of ``n_styles`` styles; styles
own a few brands and colours, so the features carry style information. A user
holds a Dirichlet mixture over styles and each session (on its own day)
follows one style drawn from it. Entities are drawn with probability
proportional to ``exp(affinity / temperature) * popularity`` where affinity is
1 for the session's style and 0 otherwise. Every user's last interaction is an
outfit from their last session, so leave-last-out evaluation always has a
target.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..datamodel import Catalog, Creator, Interaction, Item, Outfit, UserContext, save_interactions

BASE_TS = 1_700_006_400  # midnight UTC
N_CATEGORIES = 6
N_PRICE = 5
N_MARKETS = 3
N_DEVICES = 3
N_GENDER = 3
COLORS_PER_STYLE = 2
BRANDS_PER_STYLE = 3


@dataclass
class SynthConfig:
    n_users: int = 5000
    n_items: int = 1000
    n_outfits: int = 200
    n_creators: int = 20
    n_styles: int = 8
    mean_sessions: float = 2.0
    max_sessions: int = 8
    mean_session_length: float = 4.0
    max_session_length: int = 12
    temperature: float = 0.25
    popularity_skew: float = 1.0
    mixture_concentration: float = 0.3
    cold_start_share: float = 0.05
    partial_share: float = 0.10
    missing_rate: float = 0.05
    end_day: int = 365
    seed: int = 7

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_outfits", "n_creators", "n_styles", "max_sessions",
                     "max_session_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_outfits < self.n_styles:
            raise ValueError("need at least one outfit per style (n_outfits >= n_styles)")
        if self.n_creators > self.n_outfits:
            raise ValueError("every creator needs an outfit (n_creators <= n_outfits)")
        if self.n_items < 2 * self.n_styles:
            raise ValueError("need at least two items per style (n_items >= 2 * n_styles)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.cold_start_share + self.partial_share <= 1:
            raise ValueError("cold_start_share + partial_share must lie in [0, 1]")

    def vocab_sizes(self) -> dict[str, int]:
        return {"category": N_CATEGORIES, "color": self.n_styles * COLORS_PER_STYLE,
                "brand": self.n_styles * BRANDS_PER_STYLE, "price_bucket": N_PRICE,
                "market": N_MARKETS, "device": N_DEVICES, "gender_intent": N_GENDER}


@dataclass
class SynthData:
    catalog: Catalog
    sequences: dict[str, list[Interaction]]
    contexts: dict[str, UserContext]
    styles: dict[str, np.ndarray]  # per entity type: style of each entity, index order
    segments: dict[str, str]       # planted user tier


def _popularity(rng, n, skew):
    ranks = rng.permutation(n) + 1.0
    return ranks ** -skew


def generate_synthetic(config: SynthConfig | None = None) -> SynthData:
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s = cfg.n_styles

    # items: style round-robin so every style has members
    item_style = np.arange(cfg.n_items) % s
    rng.shuffle(item_style)
    items = []
    for n, st in enumerate(item_style):
        brand = int(st * BRANDS_PER_STYLE + rng.integers(BRANDS_PER_STYLE)) if rng.random() < 0.85 \
            else int(rng.integers(s * BRANDS_PER_STYLE))
        color = int(st * COLORS_PER_STYLE + rng.integers(COLORS_PER_STYLE)) if rng.random() < 0.7 \
            else int(rng.integers(s * COLORS_PER_STYLE))
        items.append(Item(
            id=f"i{n:04d}",
            category=int(rng.integers(N_CATEGORIES)),
            color=color,
            brand=None if rng.random() < cfg.missing_rate else brand,
            price_bucket=None if rng.random() < cfg.missing_rate else int(rng.integers(N_PRICE)),
            age_days=int(rng.integers(0, 365)),
        ))
    by_style = [np.flatnonzero(item_style == st) for st in range(s)]

    creator_style = np.arange(cfg.n_creators) % s
    outfit_style = np.arange(cfg.n_outfits) % s
    rng.shuffle(outfit_style)
    # one outfit per creator first, so no creator is empty
    creator_of = np.full(cfg.n_outfits, -1)
    for c in range(cfg.n_creators):
        free = np.flatnonzero((outfit_style == creator_style[c]) & (creator_of < 0))
        if free.size == 0:
            free = np.flatnonzero(creator_of < 0)
            outfit_style[free[0]] = creator_style[c]
        creator_of[free[0]] = c
    outfits = []
    for o in range(cfg.n_outfits):
        st = outfit_style[o]
        pool = by_style[st]
        size = int(min(rng.integers(2, 6), pool.size))
        members = tuple(items[i].id for i in rng.choice(pool, size=size, replace=False))
        c = creator_of[o]
        if c < 0:
            same = np.flatnonzero(creator_style == st)
            c = int(rng.choice(same)) if same.size and rng.random() < 0.8 else -1
            creator_of[o] = c
        outfits.append(Outfit(f"o{o:04d}", members, None if c < 0 else f"c{c:02d}",
                              age_days=int(rng.integers(0, 180))))
    creators = [Creator(f"c{c:02d}", tuple(outfits[o].id for o in np.flatnonzero(creator_of == c)))
                for c in range(cfg.n_creators)]
    catalog = Catalog(items, outfits, creators, cfg.vocab_sizes())

    styles = {"item": item_style, "outfit": outfit_style, "creator": creator_style}
    ids = {"item": catalog.ids("item"), "outfit": catalog.ids("outfit"), "creator": catalog.ids("creator")}
    weights = {}
    for et, st_arr in styles.items():
        pop = _popularity(rng, len(st_arr), cfg.popularity_skew)
        boost = np.exp((st_arr[None, :] == np.arange(s)[:, None]) / cfg.temperature)
        w = boost * pop[None, :]
        weights[et] = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)

    def draw(et, style):
        cdf = weights[et][style]
        return ids[et][min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)]

    style_gender = np.arange(s) % N_GENDER
    style_market = (np.arange(s) // N_GENDER) % N_MARKETS
    types = np.array(["click", "wishlist", "purchase"])
    type_p = np.array([0.8, 0.15, 0.05])
    sequences: dict[str, list[Interaction]] = {}
    contexts: dict[str, UserContext] = {}
    segments: dict[str, str] = {}
    for u in range(cfg.n_users):
        uid = f"u{u:05d}"
        mix = rng.dirichlet(np.full(s, cfg.mixture_concentration))
        dominant = int(np.argmax(mix))
        contexts[uid] = UserContext(
            uid,
            market=int(style_market[dominant]) if rng.random() < 0.6 else int(rng.integers(N_MARKETS)),
            device=int(rng.integers(N_DEVICES)),
            gender_intent=int(style_gender[dominant]) if rng.random() < 0.8 else int(rng.integers(N_GENDER)),
        )
        roll = rng.random()
        tier = "cold" if roll < cfg.cold_start_share else \
            "partial" if roll < cfg.cold_start_share + cfg.partial_share else "existing"
        segments[uid] = tier
        n_sessions = 1 if tier == "cold" else 1 + min(int(rng.poisson(cfg.mean_sessions)), cfg.max_sessions - 1)
        days = [cfg.end_day - int(rng.integers(0, 3))]
        for _ in range(n_sessions - 1):
            days.append(days[-1] - 1 - int(rng.geometric(0.25)))
        days.reverse()
        seq: list[Interaction] = []
        last_style = dominant
        for day in days:
            style = int(rng.choice(s, p=mix))
            last_style = style
            ts = BASE_TS + day * 86400 + int(rng.integers(8 * 3600, 22 * 3600))
            length = 0 if tier == "cold" else 1 + min(int(rng.poisson(cfg.mean_session_length)),
                                                      cfg.max_session_length - 1)
            for _ in range(length):
                if tier == "partial":
                    et = "item"
                else:
                    et = ("item", "outfit", "creator")[int(rng.choice(3, p=[0.6, 0.3, 0.1]))]
                seq.append(Interaction(uid, ts, et, draw(et, style), str(rng.choice(types, p=type_p))))
                ts += int(rng.integers(30, 600))
        seq.append(Interaction(uid, ts, "outfit", draw("outfit", last_style), str(rng.choice(types, p=type_p))))
        sequences[uid] = seq
    return SynthData(catalog, sequences, contexts, styles, segments)


def write_synthetic(data: SynthData, out_dir: str | Path, config: SynthConfig | None = None) -> Path:
    out = Path(out_dir)
    data.catalog.save(out)
    save_interactions(out / "interactions.jsonl", data.sequences)
    with open(out / "contexts.jsonl", "w") as fh:
        for uid in sorted(data.contexts):
            c = data.contexts[uid]
            fh.write(json.dumps({"user_id": uid, "market": c.market, "device": c.device,
                                 "gender_intent": c.gender_intent}) + "\n")
    if config is not None:
        (out / "synth.json").write_text(json.dumps(asdict(config), sort_keys=True, indent=1) + "\n")
    return out
