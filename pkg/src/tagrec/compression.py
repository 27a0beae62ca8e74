"""Behavior sequence compression: project items, bucket by age, and
dual-aggregate into the "buckets | items" prompt representation.

The two aggregation steps: first group items under (time bucket,
behavior) keys, then invert so ordered item sequences become keys that
collect every temporal-behavioral context which produced them.  The
result renders to a canonical text grammar that parses back losslessly.
"""

from __future__ import annotations

import calendar
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum

from .errors import CompressionError, RangeError, ValidationError
from .events import BehaviorKind, BehaviorLog, UserEvent
from .textproc import token_count

DAY = 86400
DEFAULT_BUDGET = 128_000
DEFAULT_EXTRA_LIMIT = 3
# Attribute keys ranked ahead of everything else when truncating.
DEFAULT_ATTR_PRIORITY = ("material", "color", "size")


class Granularity(str, Enum):
    DAILY = "daily"
    MONTHLY = "monthly"
    YEARLY = "yearly"


_LABEL_PATTERNS = {
    Granularity.DAILY: re.compile(r"^\d{4}-\d{2}-\d{2}$"),
    Granularity.MONTHLY: re.compile(r"^\d{4}-\d{2}$"),
    Granularity.YEARLY: re.compile(r"^\d{4}$"),
}


@dataclass(frozen=True)
class TimeBucket:
    granularity: Granularity
    label: str

    def __post_init__(self) -> None:
        if not _LABEL_PATTERNS[self.granularity].match(self.label):
            raise ValidationError(
                f"label {self.label!r} does not match {self.granularity.value} pattern")

    @property
    def start_epoch(self) -> int:
        """UTC epoch of the bucket's first second, for chronology."""
        parts = [int(p) for p in self.label.split("-")]
        year = parts[0]
        month = parts[1] if len(parts) > 1 else 1
        day = parts[2] if len(parts) > 2 else 1
        return calendar.timegm((year, month, day, 0, 0, 0))


@dataclass(frozen=True)
class CompressedItem:
    item_id: str
    name: str
    category: str = ""
    brand: str = ""
    extra: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("compressed item needs a non-empty name")


@dataclass(frozen=True)
class CompressedGroup:
    items: tuple[CompressedItem, ...]
    contexts: tuple[tuple[TimeBucket, BehaviorKind], ...]

    @property
    def latest_epoch(self) -> int:
        return max(bucket.start_epoch for bucket, _ in self.contexts)


@dataclass(frozen=True)
class CompressedBehaviorLog:
    user_id: str
    groups: tuple[CompressedGroup, ...]
    rendered: str
    token_count: int
    truncated: bool = False


def compress_item(event: UserEvent, limit: int = DEFAULT_EXTRA_LIMIT,
                  priority: tuple[str, ...] = DEFAULT_ATTR_PRIORITY) -> CompressedItem:
    """Deterministic projection of an event's item fields.

    Keeps the item name (title, falling back to category), category,
    brand, and at most ``limit`` attributes ranked by the priority list
    then by input order.
    """
    name = event.item_title or event.category_id
    if not name:
        raise CompressionError(f"event for item {event.item_id!r} has no title or category")

    def rank(pair_index: tuple[int, tuple[str, str]]) -> tuple[int, int]:
        index, (key, _) = pair_index
        try:
            return (priority.index(key), index)
        except ValueError:
            return (len(priority), index)

    ranked = sorted(enumerate(event.attributes), key=rank)
    extra = tuple(pair for _, pair in ranked[:limit])
    return CompressedItem(
        item_id=event.item_id or f"q:{event.query_text}",
        name=name,
        category=event.category_id or "",
        brand=event.brand or "",
        extra=extra,
    )


def assign_bucket(ts: int, now: int) -> TimeBucket:
    """Age under 30 days -> daily, under 365 days -> monthly, else yearly."""
    if ts > now:
        raise RangeError(f"timestamp {ts} is after now {now}")
    age = now - ts
    moment = datetime.fromtimestamp(ts, tz=timezone.utc)
    if age < 30 * DAY:
        return TimeBucket(Granularity.DAILY, moment.strftime("%Y-%m-%d"))
    if age < 365 * DAY:
        return TimeBucket(Granularity.MONTHLY, moment.strftime("%Y-%m"))
    return TimeBucket(Granularity.YEARLY, moment.strftime("%Y"))


def dual_aggregate(
    user_id: str,
    entries: list[tuple[CompressedItem, TimeBucket, BehaviorKind]],
) -> CompressedBehaviorLog:
    """Two-step aggregation producing the compressed log.

    Step 1 groups items under (bucket, behavior) keys, keeping
    first-occurrence item order and dropping duplicate item ids within
    a key.  Step 2 inverts the mapping: the ordered item-id sequence
    becomes the key and collects every context that produced it,
    contexts ordered chronologically.
    """
    step1: dict[tuple[TimeBucket, BehaviorKind], dict] = {}
    for index, (item, bucket, behavior) in enumerate(entries):
        key = (bucket, behavior)
        slot = step1.setdefault(key, {"items": [], "seen": set(), "first": index})
        if item.item_id not in slot["seen"]:
            slot["seen"].add(item.item_id)
            slot["items"].append(item)

    step2: dict[tuple[str, ...], dict] = {}
    for (bucket, behavior), slot in step1.items():
        seq_key = tuple(item.item_id for item in slot["items"])
        group = step2.setdefault(seq_key, {"items": slot["items"], "contexts": []})
        group["contexts"].append((bucket, behavior, slot["first"]))

    keyed_groups = []
    for group in step2.values():
        contexts = sorted(group["contexts"], key=lambda c: (c[0].start_epoch, c[2]))
        first_epoch, first_index = min(
            (bucket.start_epoch, idx) for bucket, _, idx in contexts)
        keyed_groups.append((
            (first_epoch, first_index),
            CompressedGroup(
                items=tuple(group["items"]),
                contexts=tuple((bucket, behavior) for bucket, behavior, _ in contexts),
            ),
        ))
    keyed_groups.sort(key=lambda pair: pair[0])
    return build_log(user_id, tuple(group for _, group in keyed_groups))


_SANITIZE = re.compile(r"[|,\[\]()\n;=]")


def _clean(text: str) -> str:
    return re.sub(r"\s+", " ", _SANITIZE.sub(" ", text)).strip()


def _render_item(item: CompressedItem) -> str:
    annotations = []
    if item.category:
        annotations.append(f"cat={_clean(item.category)}")
    if item.brand:
        annotations.append(f"brand={_clean(item.brand)}")
    annotations.extend(f"{_clean(k)}={_clean(v)}" for k, v in item.extra)
    name = _clean(item.name)
    if annotations:
        return f"{name} [{'; '.join(annotations)}]"
    return name


def _render_group(group: CompressedGroup) -> str:
    by_bucket: dict[TimeBucket, list[BehaviorKind]] = {}
    order: list[TimeBucket] = []
    for bucket, behavior in group.contexts:
        if bucket not in by_bucket:
            by_bucket[bucket] = []
            order.append(bucket)
        by_bucket[bucket].append(behavior)
    bucket_list = ", ".join(
        f"{bucket.label}({','.join(b.value for b in by_bucket[bucket])})"
        for bucket in order)
    item_list = ", ".join(_render_item(item) for item in group.items)
    return f"{bucket_list} | {item_list}"


def render(groups: tuple[CompressedGroup, ...]) -> str:
    return "\n".join(_render_group(group) for group in groups)


def build_log(user_id: str, groups: tuple[CompressedGroup, ...],
              truncated: bool = False) -> CompressedBehaviorLog:
    rendered = render(groups)
    return CompressedBehaviorLog(
        user_id=user_id,
        groups=groups,
        rendered=rendered,
        token_count=token_count(rendered),
        truncated=truncated,
    )


_BUCKET_RE = re.compile(r"([0-9-]+)\(([^)]*)\)")
_ITEM_RE = re.compile(r"^(?P<name>[^\[\]]+?)(?:\s*\[(?P<ann>[^\]]*)\])?$")


def _granularity_for(label: str) -> Granularity:
    for granularity, pattern in _LABEL_PATTERNS.items():
        if pattern.match(label):
            return granularity
    raise ValidationError(f"unrecognized bucket label {label!r}")


def parse(user_id: str, text: str) -> CompressedBehaviorLog:
    """Inverse of :func:`render` over canonical text.

    Item ids are not rendered, so parsed items use their name as a
    surrogate id; everything else round-trips exactly.
    """
    groups = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if " | " not in line:
            raise ValidationError(f"group line missing separator: {line!r}")
        bucket_part, item_part = line.split(" | ", 1)
        contexts = []
        for match in _BUCKET_RE.finditer(bucket_part):
            label, behaviors = match.groups()
            bucket = TimeBucket(_granularity_for(label), label)
            for name in behaviors.split(","):
                contexts.append((bucket, BehaviorKind(name)))
        if not contexts:
            raise ValidationError(f"group line has no contexts: {line!r}")
        items = []
        for chunk in item_part.split(", "):
            match = _ITEM_RE.match(chunk.strip())
            if not match:
                raise ValidationError(f"unparseable item: {chunk!r}")
            name = match.group("name").strip()
            category = brand = ""
            extra = []
            if match.group("ann"):
                for pair in match.group("ann").split("; "):
                    key, _, value = pair.partition("=")
                    if key == "cat":
                        category = value
                    elif key == "brand":
                        brand = value
                    else:
                        extra.append((key, value))
            items.append(CompressedItem(
                item_id=name, name=name, category=category,
                brand=brand, extra=tuple(extra)))
        groups.append(CompressedGroup(items=tuple(items), contexts=tuple(contexts)))
    return build_log(user_id, tuple(groups))


def fit_budget(log: CompressedBehaviorLog, budget: int = DEFAULT_BUDGET) -> CompressedBehaviorLog:
    """Drop oldest groups until the rendering fits the token budget.

    Groups are never split unless a single group alone exceeds the
    budget, in which case its oldest items are dropped and the
    truncation flag is set.
    """
    if budget <= 0:
        raise RangeError("budget must be positive")
    if log.token_count <= budget:
        return log
    groups = list(log.groups)
    by_age = sorted(groups, key=lambda g: g.latest_epoch)
    current = log
    for victim in by_age:
        if len(groups) == 1:
            break
        groups.remove(victim)
        current = build_log(log.user_id, tuple(groups))
        if current.token_count <= budget:
            return current
    # Single group left and still over budget: shed oldest items.
    group = groups[0]
    items = list(group.items)
    while len(items) > 1:
        items.pop(0)
        candidate = build_log(
            log.user_id, (replace(group, items=tuple(items)),), truncated=True)
        if candidate.token_count <= budget:
            return candidate
    return build_log(
        log.user_id, (replace(group, items=tuple(items)),), truncated=True)


def entries_for_log(log: BehaviorLog, now: int,
                    limit: int = DEFAULT_EXTRA_LIMIT,
                    priority: tuple[str, ...] = DEFAULT_ATTR_PRIORITY,
                    ) -> list[tuple[CompressedItem, TimeBucket, BehaviorKind]]:
    """Project a behavior log into dual-aggregation entries.

    Search events carry no item fields, so the query text stands in as
    a pseudo-item; everything else goes through :func:`compress_item`.
    """
    entries = []
    for event in log.events:
        if event.behavior is BehaviorKind.SEARCH:
            item = CompressedItem(item_id=f"q:{event.query_text}",
                                  name=event.query_text or "")
        else:
            item = compress_item(event, limit=limit, priority=priority)
        entries.append((item, assign_bucket(event.timestamp, now), event.behavior))
    return entries


def compress(log: BehaviorLog, now: int, *,
             limit: int = DEFAULT_EXTRA_LIMIT,
             priority: tuple[str, ...] = DEFAULT_ATTR_PRIORITY,
             budget: int | None = DEFAULT_BUDGET) -> CompressedBehaviorLog:
    """Full compression path: project, bucket, dual-aggregate, budget."""
    compressed = dual_aggregate(log.user_id, entries_for_log(log, now, limit, priority))
    if budget is not None:
        compressed = fit_budget(compressed, budget)
    return compressed
