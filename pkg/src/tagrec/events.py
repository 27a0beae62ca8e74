"""Raw interaction log ingestion, storage, and filtered views.

Storage is an append-only per-user JSONL file set plus an in-memory
index; there is no database.  Ordinary clicks are stored and tagged,
not discarded: interest mining filters them out via
:func:`reliable_filter`, while retrieval training and tag freshness
checks still consume them.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator
from urllib.parse import quote, unquote

from .errors import RangeError, ValidationError


class BehaviorKind(str, Enum):
    FAVORITE = "favorite"
    PURCHASE = "purchase"
    ADD_TO_CART = "add_to_cart"
    DETAIL_VIEW = "detail_view"
    REVIEW_READ = "review_read"
    SEARCH = "search"
    ORDINARY_CLICK = "ordinary_click"

    @property
    def reliable(self) -> bool:
        """True for every kind except ordinary clicks."""
        return self is not BehaviorKind.ORDINARY_CLICK


# Wire field order is part of the JSONL contract; absent fields are omitted.
_WIRE_FIELDS = ("user_id", "item_id", "behavior", "ts", "query", "title",
                "category", "brand", "price", "attrs")


@dataclass(frozen=True)
class UserEvent:
    user_id: str
    behavior: BehaviorKind
    timestamp: int
    item_id: str | None = None
    query_text: str | None = None
    item_title: str | None = None
    category_id: str | None = None
    brand: str | None = None
    price: float | None = None
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.user_id:
            raise ValidationError("missing user_id")
        if not isinstance(self.timestamp, int) or self.timestamp <= 0:
            raise ValidationError("invalid timestamp")
        if self.behavior is BehaviorKind.SEARCH:
            if not self.query_text:
                raise ValidationError("missing query")
            if self.item_id is not None:
                raise ValidationError("unexpected item_id on search event")
        elif not self.item_id:
            raise ValidationError("missing item_id")
        if self.price is not None and self.price < 0:
            raise ValidationError("negative price")

    def to_wire(self) -> dict:
        record = {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "behavior": self.behavior.value,
            "ts": self.timestamp,
            "query": self.query_text,
            "title": self.item_title,
            "category": self.category_id,
            "brand": self.brand,
            "price": self.price,
            "attrs": [list(kv) for kv in self.attributes] or None,
        }
        return {k: record[k] for k in _WIRE_FIELDS if record[k] is not None}

    @classmethod
    def from_wire(cls, record: dict) -> "UserEvent":
        if "user_id" not in record:
            raise ValidationError("missing user_id")
        if "ts" not in record:
            raise ValidationError("missing timestamp")
        ts = record["ts"]
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise ValidationError("invalid timestamp")
        behavior_raw = record.get("behavior")
        if behavior_raw is None:
            raise ValidationError("missing behavior")
        try:
            behavior = BehaviorKind(behavior_raw)
        except ValueError:
            raise ValidationError(f"unknown behavior {behavior_raw!r}") from None
        attrs = record.get("attrs") or []
        try:
            attributes = tuple((str(k), str(v)) for k, v in attrs)
        except (TypeError, ValueError):
            raise ValidationError("malformed attrs") from None
        return cls(
            user_id=record["user_id"],
            behavior=behavior,
            timestamp=ts,
            item_id=record.get("item_id"),
            query_text=record.get("query"),
            item_title=record.get("title"),
            category_id=record.get("category"),
            brand=record.get("brand"),
            price=record.get("price"),
            attributes=attributes,
        )


def canonical_line(event: UserEvent) -> str:
    """Canonical single-line JSON rendering used for storage and export."""
    return json.dumps(event.to_wire(), ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True)
class BehaviorLog:
    user_id: str
    events: tuple[UserEvent, ...]

    def __post_init__(self) -> None:
        for ev in self.events:
            if ev.user_id != self.user_id:
                raise ValidationError("log events must share user_id")
        stamps = [ev.timestamp for ev in self.events]
        if stamps != sorted(stamps):
            raise ValidationError("log events must be time-ordered")

    @classmethod
    def from_events(cls, user_id: str, events: Iterable[UserEvent]) -> "BehaviorLog":
        ordered = sorted(events, key=lambda ev: ev.timestamp)
        return cls(user_id=user_id, events=tuple(ordered))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[UserEvent]:
        return iter(self.events)


def reliable_filter(log: BehaviorLog) -> BehaviorLog:
    """Keep only events whose behavior signals genuine intent."""
    kept = tuple(ev for ev in log.events if ev.behavior.reliable)
    return BehaviorLog(user_id=log.user_id, events=kept)


def window(log: BehaviorLog, since: int, until: int) -> BehaviorLog:
    """Events with since <= timestamp < until."""
    if since > until:
        raise RangeError(f"inverted range: since={since} > until={until}")
    kept = tuple(ev for ev in log.events if since <= ev.timestamp < until)
    return BehaviorLog(user_id=log.user_id, events=kept)


@dataclass
class IngestReport:
    accepted: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rejected(self) -> int:
        return len(self.rejects)


class EventStore:
    """Append-only per-user JSONL files with an in-memory index.

    Single writer per store instance; reads hand out immutable
    snapshots, so concurrent readers need no locking.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index: dict[str, list[UserEvent]] = {}
        self._lock = threading.Lock()
        self._loaded = False

    def _user_path(self, user_id: str) -> Path:
        return self.root / (quote(user_id, safe="") + ".jsonl")

    def _load_all(self) -> None:
        if self._loaded:
            return
        for path in sorted(self.root.glob("*.jsonl")):
            user_id = unquote(path.stem)
            if user_id in self._index:
                continue
            events = []
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        events.append(UserEvent.from_wire(json.loads(line)))
            self._index[user_id] = events
        self._loaded = True

    def ingest(self, lines: Iterable[str]) -> IngestReport:
        """Validate and append records; invalid lines go to the report."""
        report = IngestReport()
        with self._lock:
            self._load_all()
            handles: dict[str, list[str]] = {}
            for line_no, line in enumerate(lines, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as err:
                    report.rejects.append((line_no, f"invalid json: {err.msg}"))
                    continue
                if not isinstance(record, dict):
                    report.rejects.append((line_no, "invalid json: not an object"))
                    continue
                try:
                    event = UserEvent.from_wire(record)
                except ValidationError as err:
                    report.rejects.append((line_no, str(err)))
                    continue
                self._index.setdefault(event.user_id, []).append(event)
                handles.setdefault(event.user_id, []).append(canonical_line(event))
                report.accepted += 1
            for user_id, out_lines in handles.items():
                with self._user_path(user_id).open("a", encoding="utf-8") as fh:
                    fh.write("\n".join(out_lines) + "\n")
        return report

    def append(self, event: UserEvent) -> None:
        with self._lock:
            self._load_all()
            self._index.setdefault(event.user_id, []).append(event)
            with self._user_path(event.user_id).open("a", encoding="utf-8") as fh:
                fh.write(canonical_line(event) + "\n")

    def user_ids(self) -> list[str]:
        with self._lock:
            self._load_all()
            return sorted(self._index)

    def log(self, user_id: str) -> BehaviorLog:
        with self._lock:
            self._load_all()
            events = list(self._index.get(user_id, ()))
        return BehaviorLog.from_events(user_id, events)

    def export_lines(self, user_id: str, since: int | None = None,
                     until: int | None = None) -> list[str]:
        log = self.log(user_id)
        if since is not None or until is not None:
            log = window(log, since or 0, until if until is not None else 2**62)
        return [canonical_line(ev) for ev in log.events]
