"""Shipped word lists backing the deterministic rule judges and checks.

These are desk-scale stand-ins for learned classifiers: every rule that
consumes them documents itself as a stated proxy, and every table is
swappable at call sites.  The category->interest taxonomy doubles as the
default mapping for interest-pool matching and stub interest completion.
"""

from __future__ import annotations

# Category id -> interest label. Categories use disjoint product
# vocabularies so exact keyword mapping stays unambiguous in fixtures.
DEFAULT_CATEGORY_INTERESTS: dict[str, str] = {
    "tennis_gear": "tennis",
    "cookware": "cooking",
    "yoga_equipment": "yoga",
    "camping_outdoor": "outdoor travel",
    "home_decor": "home decoration",
    "skincare": "skincare",
    "pet_supplies": "pet care",
    "winter_apparel": "winter fashion",
    "summer_apparel": "summer fashion",
    "board_games": "board games",
}

# Interest label -> words that count as on-topic evidence for that
# interest. Used by the rule judges for relevance screening.
INTEREST_FIELDS: dict[str, set[str]] = {
    "tennis": {"tennis", "racket", "court", "serve", "match", "overgrip", "graphite"},
    "cooking": {"skillet", "saucepan", "wok", "spatula", "ladle", "kitchen", "recipe", "saute", "cast", "iron"},
    "yoga": {"yoga", "mat", "asana", "stretch", "bolster", "balance"},
    "outdoor travel": {
        "mountain", "mountains", "river", "rivers", "roam", "journey", "trail",
        "camp", "camping", "hike", "hiking", "tent", "outdoor", "backpack", "lantern",
    },
    "home decoration": {"clock", "vase", "lampshade", "tapestry", "decor", "wall", "shelf"},
    "skincare": {"serum", "moisturizer", "cleanser", "sunscreen", "facial", "skin", "spf"},
    "pet care": {"pet", "cat", "dog", "litter", "leash", "kennel", "paw", "scratcher"},
    "winter fashion": {"parka", "scarf", "thermal", "fleece", "coat", "winter", "wool"},
    "summer fashion": {"sandals", "sunhat", "shorts", "linen", "summer", "breezy"},
    "board games": {"dice", "meeple", "puzzle", "chess", "tabletop", "strategy"},
}

# Month -> season, northern hemisphere.
MONTH_SEASONS: dict[int, str] = {
    12: "winter", 1: "winter", 2: "winter",
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "autumn", 10: "autumn", 11: "autumn",
}

NEXT_SEASON: dict[str, str] = {
    "winter": "spring",
    "spring": "summer",
    "summer": "autumn",
    "autumn": "winter",
}

# Season -> words that pin a product to that season.
SEASON_KEYWORDS: dict[str, set[str]] = {
    "winter": {"winter", "parka", "thermal", "fleece", "snow", "ski", "earmuffs"},
    "spring": {"spring", "blossom", "raincoat"},
    "summer": {"summer", "sandals", "sunhat", "shorts", "swimsuit", "cooling"},
    "autumn": {"autumn", "harvest", "windbreaker"},
}

# Core words too broad to retrieve a concrete product.
BROAD_CORE_TERMS: set[str] = {
    "equipment", "supplies", "items", "stuff", "goods", "products",
    "accessories", "essentials", "gear", "set", "sets", "things",
    "sports equipment", "outdoor sports equipment",
}

# Words that signal need-driven rather than affection-driven behavior.
NECESSITY_TERMS: set[str] = {
    "necessities", "necessity", "daily", "household", "cleaning",
    "grocery", "groceries", "toiletries", "chores", "detergent",
}

# Evidence words that only weakly support an interest (apparel and
# merchandise referencing a topic rather than practicing it).
WEAK_EVIDENCE_TERMS: set[str] = {
    "pants", "shirt", "tshirt", "tee", "skirt", "jersey", "hoodie",
    "merchandise", "poster", "sticker", "keychain", "figurine", "plush",
}

# Hard-sell phrasing that fails the safety criterion.
HARD_SELL_TERMS: set[str] = {
    "time-limited", "offer", "hurry", "last chance", "flash sale",
    "quick buy", "buy now", "limited stock",
}

# Exaggerations that fail the factuality criterion.
EXAGGERATION_TERMS: set[str] = {
    "forever", "100%", "guaranteed", "miracle", "cure", "cutproof",
    "fireproof", "bulletproof", "unbreakable", "permanent", "magical",
}


def season_of(month: int) -> str:
    return MONTH_SEASONS[month]


def compatible_seasons(month: int) -> set[str]:
    """Current season plus the upcoming one."""
    current = season_of(month)
    return {current, NEXT_SEASON[current]}


def season_of_text(tokens: list[str]) -> str | None:
    """First season whose keyword list hits the tokens, else None."""
    token_set = set(tokens)
    for season in ("winter", "spring", "summer", "autumn"):
        if SEASON_KEYWORDS[season] & token_set:
            return season
    return None
