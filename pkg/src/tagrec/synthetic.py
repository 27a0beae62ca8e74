"""Deterministic synthetic corpus: a catalog with disjoint per-category
vocabularies, users with stable preferences, and two years of events.

Everything derives from a single seed so tests and demos reproduce
byte-identically.  Run ``python -m tagrec.synthetic --out demo`` to
materialize the JSONL/JSON inputs the CLI consumes.
"""

from __future__ import annotations

import argparse
import calendar
import json
import random
from dataclasses import dataclass
from pathlib import Path

from .catalog import Catalog, Product
from .events import BehaviorKind, BehaviorLog, UserEvent, canonical_line
from .interests import UserAttributes
from .retrieval import Interaction, RetrievalDataset

# 2026-06-15 12:00 UTC; mid-June so summer tags are in season.
BASE_NOW = calendar.timegm((2026, 6, 15, 12, 0, 0))
DAY = 86400

# Category -> (adjectives, noun phrases). Tokens are disjoint across
# categories so exact keyword mapping is unambiguous on this corpus.
CATEGORY_VOCAB: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "tennis_gear": (
        ("graphite", "topspin", "tournament", "stringing"),
        ("tennis racket", "overgrip", "vibration dampener", "racket strings", "tennis visor"),
    ),
    "cookware": (
        ("cast-iron", "enameled", "nonstick", "copper"),
        ("skillet", "saucepan", "wok spatula", "ladle", "stockpot"),
    ),
    "yoga_equipment": (
        ("non-slip", "cork", "alignment", "studio"),
        ("yoga mat", "bolster", "yoga strap", "balance block", "meditation cushion"),
    ),
    "camping_outdoor": (
        ("waterproof", "ultralight", "packable", "windproof"),
        ("hiking tent", "trail lantern", "sleeping pod", "camp stove", "trekking poles"),
    ),
    "home_decor": (
        ("retro", "minimalist", "rustic", "ceramic"),
        ("wall clock", "flower vase", "lampshade", "tapestry", "bookend pair"),
    ),
    "skincare": (
        ("hydrating", "gentle", "botanical", "brightening"),
        ("face serum", "moisturizer", "cleanser", "sunscreen", "toner mist"),
    ),
    "pet_supplies": (
        ("foldable", "washable", "interactive", "cozy"),
        ("cat scratcher", "pet carrier", "litter tray", "dog leash", "kennel bed"),
    ),
    "winter_apparel": (
        ("thermal", "quilted", "woolen", "down-filled"),
        ("parka jacket", "knit scarf", "fleece gloves", "snow boots", "earmuffs"),
    ),
    "summer_apparel": (
        ("breezy", "breathable", "linen-blend", "airy"),
        ("beach sandals", "sunhat", "chino shorts", "tank top", "swim trunks"),
    ),
    "board_games": (
        ("wooden", "strategy", "cooperative", "classic"),
        ("chess board", "dice tower", "meeple pack", "puzzle cube", "tabletop organizer"),
    ),
}

_BRANDS = ("Northway", "Luma", "Verano", "Kestrel", "Orbit")
_PRICE_BANDS = {
    "tennis_gear": (15, 240), "cookware": (12, 180), "yoga_equipment": (9, 90),
    "camping_outdoor": (20, 320), "home_decor": (8, 150), "skincare": (6, 80),
    "pet_supplies": (7, 120), "winter_apparel": (18, 260),
    "summer_apparel": (10, 95), "board_games": (14, 130),
}

_GENDERS = ("female", "male", "nonbinary")
_LOCATIONS = ("Hangzhou", "Lisbon", "Austin", "Nairobi", "Osaka", "Tallinn")


@dataclass
class SyntheticWorld:
    catalog: Catalog
    users: list[UserAttributes]
    logs: dict[str, BehaviorLog]
    preferences: dict[str, list[str]]
    now: int


def build_catalog() -> Catalog:
    products = []
    for category, (adjectives, nouns) in CATEGORY_VOCAB.items():
        lo, hi = _PRICE_BANDS[category]
        index = 0
        for adjective in adjectives:
            for noun in nouns:
                title = f"{adjective} {noun}"
                price = round(lo + (hi - lo) * ((index * 7 % 19) / 19.0), 2)
                products.append(Product(
                    item_id=f"{category}-{index:03d}",
                    title=title,
                    category=category,
                    brand=_BRANDS[index % len(_BRANDS)],
                    price=price,
                    attributes=(("material", adjective), ("line", noun.split()[-1])),
                ))
                index += 1
    return Catalog(products)


def item_tag(product: Product) -> str:
    """Training tag for an item: its lowercased title."""
    return product.title.lower()


def make_world(seed: int = 0, users: int = 60) -> SyntheticWorld:
    rng = random.Random(seed)
    catalog = build_catalog()
    by_category = catalog.categories()
    categories = sorted(by_category)
    attrs: list[UserAttributes] = []
    logs: dict[str, BehaviorLog] = {}
    preferences: dict[str, list[str]] = {}
    behaviors = (
        (BehaviorKind.ORDINARY_CLICK, 40),
        (BehaviorKind.DETAIL_VIEW, 15),
        (BehaviorKind.PURCHASE, 15),
        (BehaviorKind.FAVORITE, 10),
        (BehaviorKind.ADD_TO_CART, 10),
        (BehaviorKind.SEARCH, 10),
    )
    weighted = [kind for kind, weight in behaviors for _ in range(weight)]
    for index in range(users):
        user_id = f"u{index + 1:03d}"
        preferred = rng.sample(categories, rng.randint(2, 4))
        preferences[user_id] = preferred
        attrs.append(UserAttributes(
            user_id=user_id,
            age=rng.randint(18, 70),
            gender=rng.choice(_GENDERS),
            location=rng.choice(_LOCATIONS),
        ))
        events = []
        for _ in range(rng.randint(30, 80)):
            ts = BASE_NOW - rng.randint(1, 730) * DAY + rng.randint(0, DAY - 1)
            on_preference = rng.random() < 0.85
            category = rng.choice(preferred if on_preference else categories)
            kind = rng.choice(weighted)
            if kind is BehaviorKind.SEARCH:
                _, nouns = CATEGORY_VOCAB[category]
                events.append(UserEvent(
                    user_id=user_id, behavior=kind, timestamp=ts,
                    query_text=rng.choice(nouns), category_id=category))
            else:
                product = rng.choice(by_category[category])
                events.append(UserEvent(
                    user_id=user_id, behavior=kind, timestamp=ts,
                    item_id=product.item_id, item_title=product.title,
                    category_id=product.category, brand=product.brand,
                    price=product.price, attributes=product.attributes))
        logs[user_id] = BehaviorLog.from_events(user_id, events)
    return SyntheticWorld(catalog=catalog, users=attrs, logs=logs,
                          preferences=preferences, now=BASE_NOW)


def make_retrieval_dataset(world: SyntheticWorld) -> RetrievalDataset:
    """Click-style interactions become positives; tags are item titles."""
    items = {product.item_id: product.features()
             for product in world.catalog.ordered()}
    interactions: list[Interaction] = []
    sequences: dict[str, dict[str, list[str]]] = {}
    click_kinds = (BehaviorKind.ORDINARY_CLICK, BehaviorKind.DETAIL_VIEW,
                   BehaviorKind.FAVORITE, BehaviorKind.ADD_TO_CART)
    for user_id in sorted(world.logs):
        slots = {"click": [], "purchase": []}
        for event in world.logs[user_id].events:
            if event.item_id is None or event.item_id not in items:
                continue
            product = world.catalog.get(event.item_id)
            if event.behavior in click_kinds:
                slots["click"].append(event.item_id)
                interactions.append(Interaction(
                    user_id=user_id, item_id=event.item_id, tag=item_tag(product)))
            elif event.behavior is BehaviorKind.PURCHASE:
                slots["purchase"].append(event.item_id)
                interactions.append(Interaction(
                    user_id=user_id, item_id=event.item_id, tag=item_tag(product)))
        sequences[user_id] = slots
    return RetrievalDataset(items=items, interactions=interactions,
                            user_sequences=sequences)


def events_jsonl(world: SyntheticWorld) -> list[str]:
    lines = []
    for user_id in sorted(world.logs):
        lines.extend(canonical_line(ev) for ev in world.logs[user_id].events)
    return lines


def save_world(world: SyntheticWorld, out_dir: Path | str) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events_path = out / "events.jsonl"
    events_path.write_text("\n".join(events_jsonl(world)) + "\n", encoding="utf-8")
    world.catalog.save(out / "catalog.json")
    users_payload = [
        {"user_id": a.user_id, "age": a.age, "gender": a.gender,
         "location": a.location}
        for a in world.users
    ]
    (out / "users.json").write_text(
        json.dumps(users_payload, ensure_ascii=False, indent=1), encoding="utf-8")
    return {"events": str(events_path), "catalog": str(out / "catalog.json"),
            "users": str(out / "users.json"), "now": str(world.now)}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate the synthetic demo corpus")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--users", type=int, default=60)
    args = parser.parse_args(argv)
    world = make_world(seed=args.seed, users=args.users)
    written = save_world(world, args.out)
    print(json.dumps(written, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
