"""Tag prediction and constraint validation.

Predicts (tag, interest, rationale) triplets from the mined profile and
behavior sequences, then checks each against the constraint set:
modifier+core format, interest consistency, freshness, specificity,
and catalog validity.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

from . import lexicons
from .errors import ValidationError
from .events import BehaviorKind, BehaviorLog, reliable_filter, window
from .gateway import Gateway, LlmRequest, PromptTemplate, Task
from .interests import InterestProfile, UserAttributes
from .judge import QualityVerdict
from .textproc import tokenize

MIN_TAGS = 50
FRESHNESS_DAYS = 30
DAY = 86400


@dataclass(frozen=True)
class TagTriplet:
    tag: str
    interest: str
    reason: str
    verdict: QualityVerdict | None = None

    def to_wire(self) -> dict:
        record = {"tag": self.tag, "interest": self.interest, "reason": self.reason}
        if self.verdict is not None:
            record["verdict"] = self.verdict.to_wire()
        return record

    @classmethod
    def from_wire(cls, record: dict) -> "TagTriplet":
        verdict = record.get("verdict")
        return cls(tag=record["tag"], interest=record["interest"],
                   reason=record["reason"],
                   verdict=QualityVerdict.from_wire(verdict) if verdict else None)


@dataclass(frozen=True)
class TagPredictionSet:
    user_id: str
    triplets: tuple[TagTriplet, ...]
    generated_at: int

    def __post_init__(self) -> None:
        folded = [t.tag.casefold() for t in self.triplets]
        if len(set(folded)) != len(folded):
            raise ValidationError("tags must be unique per set (case-folded)")

    def tags(self) -> list[str]:
        return [t.tag for t in self.triplets]

    def to_wire(self) -> dict:
        return {"user_id": self.user_id, "generated_at": self.generated_at,
                "triplets": [t.to_wire() for t in self.triplets]}

    @classmethod
    def from_wire(cls, record: dict) -> "TagPredictionSet":
        return cls(user_id=record["user_id"],
                   generated_at=record["generated_at"],
                   triplets=tuple(TagTriplet.from_wire(t) for t in record["triplets"]))


def behavior_views(log: BehaviorLog, max_items: int = 50) -> dict[str, str]:
    """Render per-behavior sequences for the prediction prompt."""
    clicks, purchases, searches = [], [], []
    for event in log.events:
        if event.behavior is BehaviorKind.SEARCH:
            searches.append(event.query_text or "")
        elif event.behavior is BehaviorKind.PURCHASE:
            purchases.append(event.item_title or event.item_id or "")
        elif event.behavior in (BehaviorKind.ORDINARY_CLICK, BehaviorKind.DETAIL_VIEW):
            clicks.append(event.item_title or event.item_id or "")

    def render(values: list[str]) -> str:
        trimmed = [v for v in values if v][-max_items:]
        return ", ".join(trimmed) if trimmed else "none"

    return {
        "click_sequence": render(clicks),
        "purchase_sequence": render(purchases),
        "search_sequence": render(searches),
    }


def predict_tags(gateway: Gateway, attrs: UserAttributes, profile: InterestProfile,
                 sequences: dict[str, str], extra: str = "", *,
                 now: int | None = None, seed: int | None = None) -> TagPredictionSet:
    """Call the prediction prompt and fold parsed triplets into a set,
    deduplicating case-folded tags (first occurrence wins)."""
    template = PromptTemplate.load(Task.TAG_PREDICTION)
    request = LlmRequest(
        template=template,
        bindings={
            "user_attributes": attrs.render(),
            "user_interests": ", ".join(profile.labels()) or "none",
            "click_sequence": sequences.get("click_sequence", "none"),
            "purchase_sequence": sequences.get("purchase_sequence", "none"),
            "search_sequence": sequences.get("search_sequence", "none"),
            "extra_information": extra or "none",
        },
        seed=seed,
    )
    result = gateway.run(request)
    triplets: list[TagTriplet] = []
    seen: set[str] = set()
    for parsed in result.entries:
        key = parsed.tag.casefold()
        if key in seen:
            continue
        seen.add(key)
        triplets.append(TagTriplet(tag=parsed.tag, interest=parsed.interest,
                                   reason=parsed.reason))
    return TagPredictionSet(
        user_id=attrs.user_id,
        triplets=tuple(triplets),
        generated_at=int(now if now is not None else time.time()),
    )


def check_format(tag: str) -> tuple[bool, str, str]:
    """Split a tag into (modifier, core word) spans.

    The core is the final token group: the last two tokens when the tag
    has four or more, otherwise the last token.  A tag with fewer than
    two tokens has no modifier and fails.
    """
    words = tokenize(tag)
    if len(words) < 2:
        return False, "", ""
    core_len = 2 if len(words) >= 4 else 1
    modifier = " ".join(words[:-core_len])
    core = " ".join(words[-core_len:])
    return True, modifier, core


def check_freshness(tag: str, log: BehaviorLog, now: int,
                    horizon_days: int = FRESHNESS_DAYS) -> bool:
    """False iff the tag's core word appears in the title or query of a
    reliable event inside the freshness horizon.

    The horizon is half-open with the boundary excluded: an event at
    exactly now - horizon is already outside the window.
    """
    ok, _, core = check_format(tag)
    needle = (core if ok else tag).casefold()
    recent = window(reliable_filter(log), now - horizon_days * DAY + 1, now)
    for event in recent.events:
        haystack = f"{event.item_title or ''} {event.query_text or ''}".casefold()
        if needle and needle in haystack:
            return False
    return True


class ValidityProbe(Protocol):
    def is_valid_tag(self, tag: str) -> bool: ...


@dataclass(frozen=True)
class TripletFlags:
    format_ok: bool
    interest_consistent: bool
    not_recently_interacted: bool
    specific: bool
    valid: bool

    def to_wire(self) -> dict:
        return {"format_ok": self.format_ok,
                "interest_consistent": self.interest_consistent,
                "not_recently_interacted": self.not_recently_interacted,
                "specific": self.specific, "valid": self.valid}


@dataclass(frozen=True)
class TagConstraintReport:
    per_triplet: tuple[TripletFlags, ...]
    count_ok: bool
    season_ok: bool
    validity_checked: bool

    def to_wire(self) -> dict:
        return {"per_triplet": [f.to_wire() for f in self.per_triplet],
                "count_ok": self.count_ok, "season_ok": self.season_ok,
                "validity_checked": self.validity_checked}


def check_specific(tag: str, broad_terms: set[str] | None = None) -> bool:
    """Specificity proxy: at least three tokens and a core word outside
    the broad-term list.  The judge can override this heuristic."""
    broad = broad_terms if broad_terms is not None else lexicons.BROAD_CORE_TERMS
    words = tokenize(tag)
    if len(words) < 3:
        return False
    _, _, core = check_format(tag)
    if core in broad or (words and words[-1] in broad):
        return False
    return True


def validate_set(tag_set: TagPredictionSet, profile: InterestProfile,
                 log: BehaviorLog, now: int,
                 catalog: ValidityProbe | None = None, *,
                 min_tags: int = MIN_TAGS,
                 broad_terms: set[str] | None = None) -> TagConstraintReport:
    """Pure constraint evaluation; the report is always produced.

    When no catalog probe is supplied, validity is reported as passing
    with ``validity_checked`` cleared so consumers can tell the
    difference.
    """
    profile_labels = {label.casefold() for label in profile.labels()}
    month = datetime.fromtimestamp(now, tz=timezone.utc).month
    allowed_seasons = lexicons.compatible_seasons(month)
    flags = []
    season_ok = True
    for triplet in tag_set.triplets:
        format_ok, _, _ = check_format(triplet.tag)
        interest_consistent = triplet.interest.casefold() in profile_labels
        fresh = check_freshness(triplet.tag, log, now)
        specific = check_specific(triplet.tag, broad_terms)
        valid = catalog.is_valid_tag(triplet.tag) if catalog is not None else True
        flags.append(TripletFlags(
            format_ok=format_ok,
            interest_consistent=interest_consistent,
            not_recently_interacted=fresh,
            specific=specific,
            valid=valid,
        ))
        tag_season = lexicons.season_of_text(tokenize(triplet.tag))
        if tag_season is not None and tag_season not in allowed_seasons:
            season_ok = False
    return TagConstraintReport(
        per_triplet=tuple(flags),
        count_ok=len(tag_set.triplets) >= min_tags,
        season_ok=season_ok,
        validity_checked=catalog is not None,
    )


class TagSetStore:
    """JSONL persistence, one prediction set per line."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def save(self, tag_set: TagPredictionSet) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(tag_set.to_wire(), ensure_ascii=False) + "\n")

    def load_all(self) -> dict[str, TagPredictionSet]:
        sets: dict[str, TagPredictionSet] = {}
        if not self.path.exists():
            return sets
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    tag_set = TagPredictionSet.from_wire(json.loads(line))
                    sets[tag_set.user_id] = tag_set
        return sets

    def load(self, user_id: str) -> TagPredictionSet | None:
        return self.load_all().get(user_id)
