import random
from collections import Counter

import pytest

from tagrec import lexicons
from tagrec.compression import (CompressedItem, Granularity, TimeBucket,
                                build_log, dual_aggregate)
from tagrec.errors import ValidationError
from tagrec.events import BehaviorKind
from tagrec.gateway import Gateway, StubProvider
from tagrec.interests import (InterestPool, InterestProfile, ProfileStore,
                              UserAttributes, match_pool, mine_interests,
                              screen_interests)
from tagrec.judge import RuleJudge

NOW = 1_750_000_000


def compressed(categories):
    """One purchase group per (category, count) pair."""
    bucket = TimeBucket(Granularity.DAILY, "2025-06-10")
    entries = []
    for i, category in enumerate(categories):
        item = CompressedItem(item_id=f"i{i}", name=f"thing {i}",
                              category=category)
        entries.append((item, bucket, BehaviorKind.PURCHASE))
    return dual_aggregate("u1", entries)


def test_match_pool_frequency_ranking():
    log = compressed(["tennis gear"] * 3 + ["cookware"])
    taxonomy = {"tennis gear": "tennis", "cookware": "cooking"}
    pool = match_pool(log, taxonomy, 2)
    assert pool.interests == ("tennis", "cooking")


def test_match_pool_zero_size():
    log = compressed(["cookware"])
    assert match_pool(log, {"cookware": "cooking"}, 0).interests == ()


def test_match_pool_unmapped_categories():
    log = compressed(["mystery"])
    assert match_pool(log, {"cookware": "cooking"}, 5).interests == ()


def test_match_pool_requires_taxonomy():
    with pytest.raises(ValidationError):
        match_pool(compressed(["cookware"]), {}, 3)


def test_match_pool_ties_lexicographic():
    log = compressed(["a", "b", "a", "b"])
    taxonomy = {"a": "zeta", "b": "alpha"}
    pool = match_pool(log, taxonomy, 2)
    assert pool.interests == ("alpha", "zeta")


def test_match_pool_matches_frequency_oracle():
    rng = random.Random(13)
    categories = [f"c{rng.randrange(6)}" for _ in range(80)]
    log = compressed(categories)
    taxonomy = {f"c{i}": f"label{i}" for i in range(6)}
    pool = match_pool(log, taxonomy, 4)
    counts = Counter(taxonomy[c] for c in categories)
    expected = [label for label, _ in
                sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:4]
    assert list(pool.interests) == expected


def attrs():
    return UserAttributes(user_id="u1", age=31, gender="female",
                          location="Hangzhou")


def pool():
    return InterestPool(interests=("tennis", "cooking"))


def mining_log():
    bucket = TimeBucket(Granularity.DAILY, "2025-06-10")
    items = [CompressedItem(item_id="i1", name="graphite tennis racket",
                            category="tennis_gear"),
             CompressedItem(item_id="i2", name="copper skillet",
                            category="cookware")]
    return dual_aggregate("u1", [(i, bucket, BehaviorKind.PURCHASE)
                                 for i in items])


def test_mine_interests_full_count_no_flag():
    gateway = Gateway(StubProvider())
    profile = mine_interests(gateway, attrs(), mining_log(), pool(),
                             now=NOW, seed=1)
    assert len(profile.interests) == 12
    assert profile.flags == frozenset()
    assert profile.generated_at == NOW


def test_mine_interests_under_floor_flagged():
    gateway = Gateway(StubProvider(knobs={"interest_count": 4}))
    profile = mine_interests(gateway, attrs(), mining_log(), pool(),
                             now=NOW, seed=1)
    assert len(profile.interests) == 4
    assert "under_floor" in profile.flags


def test_mine_interests_merges_duplicate_labels():
    gateway = Gateway(StubProvider(knobs={"duplicate_interest": True}))
    profile = mine_interests(gateway, attrs(), mining_log(), pool(),
                             now=NOW, seed=1)
    labels = [e.label.casefold() for e in profile.interests]
    assert len(labels) == len(set(labels))


def test_mine_interests_deterministic_end_to_end():
    first = mine_interests(Gateway(StubProvider(seed=2)), attrs(),
                           mining_log(), pool(), now=NOW, seed=7)
    second = mine_interests(Gateway(StubProvider(seed=2)), attrs(),
                            mining_log(), pool(), now=NOW, seed=7)
    assert first == second


def test_profile_rejects_duplicate_labels():
    from tagrec.interests import InterestEntry
    with pytest.raises(ValidationError):
        InterestProfile(user_id="u1", generated_at=NOW, interests=(
            InterestEntry(label="tennis", stage="", reason="r"),
            InterestEntry(label="Tennis", stage="", reason="r"),
        ))


def test_screen_interests_filtered_view_subset():
    gateway = Gateway(StubProvider())
    log = mining_log()
    profile = mine_interests(gateway, attrs(), log, pool(), now=NOW, seed=1)
    screened = screen_interests(profile, RuleJudge(), log.rendered)
    passed = screened.passed()
    assert all(entry in screened.interests for entry in passed)
    for entry in passed:
        assert entry.verdict is not None and entry.verdict.passed
    pass_rate = len(passed) / len(screened.interests)
    positive = sum(1 for e in screened.interests
                   if e.verdict and e.verdict.passed)
    assert pass_rate == positive / len(screened.interests)


def test_screen_interests_nothing_deleted():
    gateway = Gateway(StubProvider())
    log = mining_log()
    profile = mine_interests(gateway, attrs(), log, pool(), now=NOW, seed=1)
    screened = screen_interests(profile, RuleJudge(), log.rendered)
    assert [e.label for e in screened.interests] == \
        [e.label for e in profile.interests]


class BrokenJudge:
    def evaluate(self, sample, schemas):
        raise RuntimeError("judge offline")


def test_screen_interests_judge_unavailable_flags():
    gateway = Gateway(StubProvider())
    log = mining_log()
    profile = mine_interests(gateway, attrs(), log, pool(), now=NOW, seed=1)
    screened = screen_interests(profile, BrokenJudge(), log.rendered)
    assert "unscreened" in screened.flags
    assert screened.passed() == ()


def test_attributes_age_validation():
    with pytest.raises(ValidationError):
        UserAttributes(user_id="u1", age=300)


def test_profile_store_round_trip(tmp_path):
    gateway = Gateway(StubProvider())
    log = mining_log()
    profile = screen_interests(
        mine_interests(gateway, attrs(), log, pool(), now=NOW, seed=1),
        RuleJudge(), log.rendered)
    store = ProfileStore(tmp_path / "profiles.jsonl")
    store.save(profile)
    assert store.load("u1") == profile
    assert store.load("missing") is None
