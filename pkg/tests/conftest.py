import json
from pathlib import Path

import pytest

from seqrec.datamodel import Catalog, Creator, Interaction, Item, Outfit, UserContext


def write_jsonl(path: Path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def build_tiny_catalog() -> Catalog:
    """Six items in three colours, three outfits, one creator."""
    items = [
        Item("i0", category=0, color=0, brand=0, price_bucket=0, age_days=1),
        Item("i1", category=1, color=1, brand=None, price_bucket=1, age_days=5),
        Item("i2", category=2, color=0, brand=1, price_bucket=2, age_days=0),
        Item("i3", category=0, color=1, brand=1, price_bucket=0, age_days=12),
        Item("i4", category=1, color=2, brand=2, price_bucket=1, age_days=3),
        Item("i5", category=2, color=2, brand=None, price_bucket=None, age_days=40),
    ]
    outfits = [
        Outfit("o0", ("i0", "i1"), creator_id="c0", age_days=2),
        Outfit("o1", ("i2", "i3", "i4"), age_days=20),
        Outfit("o2", ("i5",), creator_id="c0", age_days=0),
    ]
    creators = [Creator("c0", ("o0", "o2"))]
    return Catalog(items, outfits, creators,
                   {"category": 3, "color": 3, "brand": 3, "price_bucket": 3,
                    "market": 2, "device": 2, "gender_intent": 2})


@pytest.fixture
def tiny_catalog() -> Catalog:
    return build_tiny_catalog()


def make_interactions(spec, user="u", start=1_700_000_000, gap=3600):
    """spec: list of (entity_type, entity_id[, interaction_type])."""
    out = []
    for n, s in enumerate(spec):
        itype = s[2] if len(s) > 2 else "click"
        out.append(Interaction(user, start + n * gap, s[0], s[1], itype))
    return out


@pytest.fixture
def ctx() -> UserContext:
    return UserContext("u", market=1, device=0, gender_intent=1)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
