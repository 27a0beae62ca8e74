"""Interest mining: build the prompt from attributes, compressed
behavior, and a matched interest pool; parse and quality-screen the
resulting profile."""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .compression import CompressedBehaviorLog
from .errors import ValidationError
from .gateway import Gateway, LlmRequest, PromptTemplate, Task
from .judge import (DEFAULT_SCHEMAS, JudgeProvider, JudgeSample, QualityVerdict,
                    judge_sample)

INTEREST_FLOOR = 10


@dataclass(frozen=True)
class UserAttributes:
    user_id: str
    age: int | None = None
    gender: str | None = None
    location: str | None = None
    extra: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.age is not None and not 0 <= self.age <= 130:
            raise ValidationError(f"age {self.age} outside [0, 130]")

    def render(self) -> str:
        parts = []
        if self.age is not None:
            parts.append(f"age: {self.age}")
        if self.gender:
            parts.append(f"gender: {self.gender}")
        if self.location:
            parts.append(f"location: {self.location}")
        parts.extend(f"{k}: {v}" for k, v in self.extra)
        return "; ".join(parts) if parts else "unknown"


@dataclass(frozen=True)
class InterestPool:
    interests: tuple[str, ...]
    source: str = "taxonomy_match"  # or "config"

    def __post_init__(self) -> None:
        if len(set(self.interests)) != len(self.interests):
            raise ValidationError("pool labels must be unique")

    def render(self) -> str:
        return ", ".join(self.interests) if self.interests else "none"


@dataclass(frozen=True)
class InterestEntry:
    label: str
    stage: str
    reason: str
    verdict: QualityVerdict | None = None

    def to_wire(self) -> dict:
        record = {"label": self.label, "stage": self.stage, "reason": self.reason}
        if self.verdict is not None:
            record["verdict"] = self.verdict.to_wire()
        return record

    @classmethod
    def from_wire(cls, record: dict) -> "InterestEntry":
        verdict = record.get("verdict")
        return cls(label=record["label"], stage=record.get("stage", ""),
                   reason=record.get("reason", ""),
                   verdict=QualityVerdict.from_wire(verdict) if verdict else None)


@dataclass(frozen=True)
class InterestProfile:
    user_id: str
    interests: tuple[InterestEntry, ...]
    generated_at: int
    flags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        labels = [entry.label.casefold() for entry in self.interests]
        if len(set(labels)) != len(labels):
            raise ValidationError("profile labels must be unique")

    def labels(self) -> list[str]:
        return [entry.label for entry in self.interests]

    def passed(self) -> tuple[InterestEntry, ...]:
        """Screened view: only entries whose verdict passed."""
        return tuple(e for e in self.interests
                     if e.verdict is not None and e.verdict.passed)

    def to_wire(self) -> dict:
        return {
            "user_id": self.user_id,
            "generated_at": self.generated_at,
            "flags": sorted(self.flags),
            "interests": [entry.to_wire() for entry in self.interests],
        }

    @classmethod
    def from_wire(cls, record: dict) -> "InterestProfile":
        return cls(
            user_id=record["user_id"],
            generated_at=record["generated_at"],
            flags=frozenset(record.get("flags", [])),
            interests=tuple(InterestEntry.from_wire(e) for e in record["interests"]),
        )


def match_pool(log: CompressedBehaviorLog, taxonomy: dict[str, str],
               m: int) -> InterestPool:
    """Up to m interest labels whose mapped categories appear in the
    log, by descending category frequency, ties lexicographic."""
    if not taxonomy:
        raise ValidationError("taxonomy must be non-empty")
    counts: Counter[str] = Counter()
    for group in log.groups:
        for item in group.items:
            label = taxonomy.get(item.category)
            if label is not None:
                counts[label] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    labels = []
    for label, _ in ranked:
        if label not in labels:
            labels.append(label)
        if len(labels) >= m:
            break
    return InterestPool(interests=tuple(labels[:max(m, 0)]))


def mine_interests(gateway: Gateway, attrs: UserAttributes,
                   log: CompressedBehaviorLog, pool: InterestPool, *,
                   now: int | None = None, seed: int | None = None,
                   floor: int = INTEREST_FLOOR) -> InterestProfile:
    """Instantiate the mining prompt, call the gateway, and fold the
    parsed interests into a profile.

    Duplicate labels merge keeping the first reason.  Fewer than
    ``floor`` interests sets a warning flag rather than failing; stub
    providers legitimately produce short lists.
    """
    template = PromptTemplate.load(Task.INTEREST_MINING)
    request = LlmRequest(
        template=template,
        bindings={
            "user_attributes": attrs.render(),
            "compressed_behaviors": log.rendered,
            "interest_pool": pool.render(),
        },
        seed=seed,
    )
    result = gateway.run(request)
    entries: list[InterestEntry] = []
    seen: set[str] = set()
    for parsed in result.entries:
        key = parsed.interest.casefold()
        if key in seen:
            continue
        seen.add(key)
        entries.append(InterestEntry(label=parsed.interest, stage=parsed.stage,
                                     reason=parsed.reason))
    flags = set()
    if not entries:
        flags.add("empty")
    elif len(entries) < floor:
        flags.add("under_floor")
    return InterestProfile(
        user_id=attrs.user_id,
        interests=tuple(entries),
        generated_at=int(now if now is not None else time.time()),
        flags=frozenset(flags),
    )


def screen_interests(profile: InterestProfile, provider: JudgeProvider,
                     context: str, *,
                     schemas=None) -> InterestProfile:
    """Annotate every interest with a quality verdict; nothing is
    deleted.  A provider failure leaves the entry unscreened and flags
    the profile."""
    schemas = schemas or DEFAULT_SCHEMAS[Task.INTEREST_MINING]
    screened = []
    any_missing = False
    for index, entry in enumerate(profile.interests):
        sample = JudgeSample(
            sample_id=f"{profile.user_id}:interest:{index}",
            task=Task.INTEREST_MINING,
            payload={"interest": entry.label, "reason": entry.reason,
                     "context": context},
        )
        try:
            verdict = judge_sample(sample, schemas, provider)
        except Exception:
            verdict = None
        if verdict is None:
            any_missing = True
            screened.append(entry)
        else:
            screened.append(replace(entry, verdict=verdict))
    flags = set(profile.flags)
    if any_missing:
        flags.add("unscreened")
    return replace(profile, interests=tuple(screened), flags=frozenset(flags))


class ProfileStore:
    """JSONL persistence, one profile per line, latest per user wins."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def save(self, profile: InterestProfile) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(profile.to_wire(), ensure_ascii=False) + "\n")

    def load_all(self) -> dict[str, InterestProfile]:
        profiles: dict[str, InterestProfile] = {}
        if not self.path.exists():
            return profiles
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    profile = InterestProfile.from_wire(json.loads(line))
                    profiles[profile.user_id] = profile
        return profiles

    def load(self, user_id: str) -> InterestProfile | None:
        return self.load_all().get(user_id)
