import pytest

from tagrec.errors import ValidationError
from tagrec.events import BehaviorKind, BehaviorLog, UserEvent
from tagrec.gateway import Gateway, StubProvider
from tagrec.interests import InterestEntry, InterestProfile, UserAttributes
from tagrec.tags import (TagPredictionSet, TagSetStore, TagTriplet,
                         behavior_views, check_format, check_freshness,
                         check_specific, predict_tags, validate_set)

DAY = 86400
NOW = 1_750_000_000


def profile(labels=("tennis", "outdoor travel")):
    return InterestProfile(
        user_id="u1", generated_at=NOW,
        interests=tuple(InterestEntry(label=l, stage="stable", reason="r")
                        for l in labels))


def behavior_log(events=()):
    return BehaviorLog.from_events("u1", events)


def search_event(query, ts):
    return UserEvent(user_id="u1", behavior=BehaviorKind.SEARCH,
                     timestamp=ts, query_text=query)


def click_event(title, ts, behavior=BehaviorKind.ORDINARY_CLICK):
    return UserEvent(user_id="u1", behavior=behavior, timestamp=ts,
                     item_id=f"i-{title}", item_title=title)


def triplet(tag, interest="tennis"):
    return TagTriplet(tag=tag, interest=interest, reason="because")


# -- prediction ---------------------------------------------------------------


def test_predict_tags_stub_fifty():
    gateway = Gateway(StubProvider())
    tag_set = predict_tags(gateway, UserAttributes(user_id="u1"), profile(),
                           {"click_sequence": "graphite tennis racket"},
                           now=NOW, seed=1)
    assert len(tag_set.triplets) == 50
    assert tag_set.generated_at == NOW


def test_predict_tags_thirty_flagged_downstream():
    gateway = Gateway(StubProvider(knobs={"tag_count": 30}))
    tag_set = predict_tags(gateway, UserAttributes(user_id="u1"), profile(),
                           {}, now=NOW, seed=1)
    assert len(tag_set.triplets) == 30
    report = validate_set(tag_set, profile(), behavior_log(), NOW)
    assert not report.count_ok


def test_predict_tags_dedupes_case_folded():
    gateway = Gateway(StubProvider(knobs={"duplicate_tag": True}))
    tag_set = predict_tags(gateway, UserAttributes(user_id="u1"), profile(),
                           {}, now=NOW, seed=1)
    folded = [t.tag.casefold() for t in tag_set.triplets]
    assert len(folded) == len(set(folded))


def test_tag_set_rejects_duplicates():
    with pytest.raises(ValidationError):
        TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
            triplet("waterproof hiking boots"),
            triplet("Waterproof Hiking Boots"),
        ))


# -- format --------------------------------------------------------------------


def test_check_format_paper_example():
    ok, modifier, core = check_format("Outdoor waterproof non-slip hiking boots")
    assert ok
    assert core == "hiking boots"
    assert modifier.startswith("outdoor waterproof")


def test_check_format_single_token():
    assert check_format("boots") == (False, "", "")


def test_check_format_empty():
    assert check_format("") == (False, "", "")


def test_check_format_two_tokens():
    ok, modifier, core = check_format("waterproof boots")
    assert ok and modifier == "waterproof" and core == "boots"


# -- freshness --------------------------------------------------------------------


def test_freshness_blocks_recent_search():
    log = behavior_log([search_event("yoga mat", NOW - 10 * DAY)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is False


def test_freshness_allows_old_search():
    log = behavior_log([search_event("yoga mat", NOW - 45 * DAY)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is True


def test_freshness_no_overlap():
    log = behavior_log([search_event("copper skillet", NOW - 5 * DAY)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is True


def test_freshness_boundary_half_open():
    log = behavior_log([search_event("yoga mat", NOW - 30 * DAY)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is True
    log = behavior_log([search_event("yoga mat", NOW - 30 * DAY + 1)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is False


def test_freshness_ignores_unreliable_clicks():
    log = behavior_log([click_event("yoga mat deluxe", NOW - 2 * DAY)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is True
    log = behavior_log([click_event("yoga mat deluxe", NOW - 2 * DAY,
                                    behavior=BehaviorKind.DETAIL_VIEW)])
    assert check_freshness("non-slip cork yoga mat", log, NOW) is False


# -- specificity ---------------------------------------------------------------------


def test_specific_broad_core_rejected():
    assert check_specific("Mountaineering outdoor sports equipment") is False


def test_specific_short_tag_rejected():
    assert check_specific("hiking boots") is False


def test_specific_concrete_tag_accepted():
    assert check_specific("waterproof non-slip hiking boots") is True


# -- validate_set ------------------------------------------------------------------------


class StubCatalogProbe:
    def __init__(self, known):
        self.known = known

    def is_valid_tag(self, tag):
        return tag in self.known


def test_validate_set_interest_consistency():
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
        triplet("graphite tennis racket case", interest="tennis"),
        triplet("hydrating face serum kit", interest="Skincare"),
    ))
    report = validate_set(tag_set, profile(), behavior_log(), NOW)
    assert report.per_triplet[0].interest_consistent is True
    assert report.per_triplet[1].interest_consistent is False


def test_validate_set_interest_consistency_matches_membership_oracle():
    labels = ["tennis", "cooking", "yoga"]
    triplets = tuple(triplet(f"sturdy handmade item number{i}",
                             interest=(labels + ["ghost"])[i % 4])
                     for i in range(12))
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=triplets)
    report = validate_set(tag_set, profile(tuple(labels)), behavior_log(), NOW)
    members = {l.casefold() for l in labels}
    for t, flags in zip(triplets, report.per_triplet):
        assert flags.interest_consistent == (t.interest.casefold() in members)


def test_validate_set_validity_against_catalog():
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
        triplet("smart coaster premium gadget"),
        triplet("graphite tennis racket case"),
    ))
    probe = StubCatalogProbe({"graphite tennis racket case"})
    report = validate_set(tag_set, profile(), behavior_log(), NOW, catalog=probe)
    assert report.validity_checked
    assert report.per_triplet[0].valid is False
    assert report.per_triplet[1].valid is True


def test_validate_set_without_catalog_marks_unchecked():
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW,
                               triplets=(triplet("graphite tennis racket"),))
    report = validate_set(tag_set, profile(), behavior_log(), NOW)
    assert not report.validity_checked
    assert report.per_triplet[0].valid is True


def test_validate_set_season_flag():
    # NOW falls in June (summer); winter-pinned tags are off season.
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
        triplet("woolen winter parka coat"),
    ))
    report = validate_set(tag_set, profile(), behavior_log(), NOW)
    assert report.season_ok is False
    summer_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
        triplet("breezy linen summer shorts"),
    ))
    assert validate_set(summer_set, profile(), behavior_log(), NOW).season_ok


def test_validate_set_pure():
    tag_set = TagPredictionSet(user_id="u1", generated_at=NOW, triplets=(
        triplet("waterproof non-slip hiking boots", interest="outdoor travel"),
    ))
    log = behavior_log([search_event("hiking boots", NOW - 3 * DAY)])
    first = validate_set(tag_set, profile(), log, NOW)
    second = validate_set(tag_set, profile(), log, NOW)
    assert first == second
    assert first.per_triplet[0].not_recently_interacted is False


# -- views and persistence ------------------------------------------------------------------


def test_behavior_views_buckets_by_kind():
    log = behavior_log([
        click_event("graphite tennis racket", NOW - 5 * DAY),
        click_event("copper skillet", NOW - 4 * DAY,
                    behavior=BehaviorKind.PURCHASE),
        search_event("yoga mat", NOW - 3 * DAY),
    ])
    views = behavior_views(log)
    assert views["click_sequence"] == "graphite tennis racket"
    assert views["purchase_sequence"] == "copper skillet"
    assert views["search_sequence"] == "yoga mat"


def test_behavior_views_empty_slots():
    views = behavior_views(behavior_log())
    assert views == {"click_sequence": "none", "purchase_sequence": "none",
                     "search_sequence": "none"}


def test_tag_set_store_round_trip(tmp_path):
    gateway = Gateway(StubProvider())
    tag_set = predict_tags(gateway, UserAttributes(user_id="u1"), profile(),
                           {}, now=NOW, seed=1)
    store = TagSetStore(tmp_path / "tags.jsonl")
    store.save(tag_set)
    assert store.load("u1") == tag_set
