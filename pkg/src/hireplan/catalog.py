"""Object catalog: categories, furniture geometry and the shipped commonsense tables."""

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

WALL = "Wall"


@dataclass(frozen=True)
class FurnitureSpec:
    length: int  # footprint cells along the wall
    body_levels: tuple
    slot_levels: tuple  # receptacle slots per footprint cell
    openable: bool = False
    toggleable: bool = False


FURNITURE = {
    "Cabinet": FurnitureSpec(1, (0,), (0,), openable=True),
    "UpperCabinet": FurnitureSpec(1, (2,), (2,), openable=True),
    "Drawer": FurnitureSpec(1, (1,), (1,), openable=True),
    "Fridge": FurnitureSpec(1, (0, 1, 2), (1, 2), openable=True),
    "Microwave": FurnitureSpec(1, (1,), (1,), openable=True),
    "Sink": FurnitureSpec(1, (0,), (1,)),
    "CounterTop": FurnitureSpec(2, (0,), (1,)),
    "DiningTable": FurnitureSpec(2, (0,), (1,)),
    "Desk": FurnitureSpec(2, (0,), (1,)),
    "Sofa": FurnitureSpec(2, (0,), (1,)),
    "Shelf": FurnitureSpec(1, (0, 1, 2), (0, 2)),
    "GarbageCan": FurnitureSpec(1, (0,), (0,)),
    "FloorLamp": FurnitureSpec(1, (0, 1, 2), (), toggleable=True),
}

# Cabinets come in a floor-level and a wall-mounted variant; both report as "Cabinet".
FURNITURE_CATEGORY = {"UpperCabinet": "Cabinet"}

SMALL = {
    # category: set of flags
    "Mug": {"cleanable", "heatable", "coolable"},
    "Cup": {"cleanable", "heatable", "coolable"},
    "Bowl": {"cleanable", "heatable", "coolable"},
    "Plate": {"cleanable"},
    "Pan": {"cleanable", "coolable"},
    "Knife": {"cleanable"},
    "Spoon": {"cleanable"},
    "DishSponge": set(),
    "Apple": {"heatable", "coolable", "sliceable"},
    "Tomato": {"heatable", "coolable", "sliceable"},
    "Potato": {"heatable", "coolable", "sliceable"},
    "Lettuce": {"coolable", "sliceable"},
    "Bread": {"heatable", "coolable", "sliceable"},
    "Egg": {"heatable", "coolable"},
    "CreditCard": set(),
    "Book": set(),
    "Pencil": set(),
    "KeyChain": set(),
    "RemoteControl": set(),
    "Watch": set(),
}

SLICED = {c: c + "Sliced" for c, flags in SMALL.items() if "sliceable" in flags}

HOSTS = sorted({FURNITURE_CATEGORY.get(k, k) for k in FURNITURE})
SMALL_CATEGORIES = sorted(SMALL) + sorted(SLICED.values())
CATEGORIES = [WALL] + HOSTS + SMALL_CATEGORIES
CATEGORY_INDEX = {c: i + 1 for i, c in enumerate(CATEGORIES)}  # 0 = no category
OPENABLE = {FURNITURE_CATEGORY.get(k, k) for k, f in FURNITURE.items() if f.openable}
APPLIANCE_FOR = {"Clean": "Sink", "Heat": "Microwave", "Cool": "Fridge"}


class UnknownCategory(KeyError):
    pass


def check_category(category):
    if category not in CATEGORY_INDEX:
        raise UnknownCategory(category)
    return category


def is_small(category):
    return category in SMALL or category in SLICED.values()


def flags(category):
    if category in SMALL:
        return SMALL[category]
    return set()


@lru_cache(maxsize=None)
def _load(name):
    return json.loads(resources.files("hireplan.data").joinpath(name).read_text())


def cooccurrence():
    """Small-object category -> list of (host, weight), heaviest first."""
    table = _load("cooccurrence.json")["hosts"]
    return {k: sorted(((h, float(w)) for h, w in v.items()), key=lambda hw: (-hw[1], hw[0]))
            for k, v in table.items()}


def synonyms():
    pairs = _load("synonyms.json")["pairs"]
    out = {}
    for a, b in pairs:
        out.setdefault(a, set()).add(b)
        out.setdefault(b, set()).add(a)
    return out


def tokens(name):
    return {t.lower() for t in re.findall(r"[A-Z][a-z]*|[a-z]+|\d+", name)}


def similarity(a, b):
    """Synonym pairs score 1.0; otherwise Jaccard overlap of CamelCase tokens."""
    if a == b:
        return 1.0
    if b in synonyms().get(a, ()):
        return 1.0
    ta, tb = tokens(a), tokens(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def nearest_category(name, candidates, min_similarity=0.5):
    """Best-scoring candidate strictly above ``min_similarity``; ties go to the
    lexicographically smallest name. Returns None when nothing qualifies."""
    best = None
    for cand in sorted(candidates):
        if cand == name:
            continue
        s = similarity(name, cand)
        if s > min_similarity and (best is None or s > best[0]):
            best = (s, cand)
    return None if best is None else best[1]
