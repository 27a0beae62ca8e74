"""Bi-weekly training-data pipeline: purify online feedback, complete
records into (tag, interest, rationale) samples, rebalance per user and
per category, and evaluate tag-prediction hit rate."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol

from . import lexicons
from .errors import ValidationError
from .events import BehaviorLog
from .interests import InterestProfile
from .textproc import tokenize

PER_USER_CAP = 80
PER_CATE_CAP = 2


@dataclass(frozen=True)
class FeedbackRecord:
    user_id: str
    item_id: str
    item_title: str
    category: str
    behavior: str              # "click" | "purchase"
    timestamp: int
    judged: dict | None = None

    def __post_init__(self) -> None:
        if self.behavior not in ("click", "purchase"):
            raise ValidationError(f"feedback behavior {self.behavior!r} unsupported")


@dataclass(frozen=True)
class TrainingSample:
    user_id: str
    tag: str
    interest: str
    rationale: str
    category: str
    timestamp: int

    def __post_init__(self) -> None:
        for name in ("user_id", "tag", "interest", "rationale"):
            if not getattr(self, name):
                raise ValidationError(f"training sample field {name} must be non-empty")

    def to_wire(self) -> dict:
        return {"user_id": self.user_id, "tag": self.tag, "interest": self.interest,
                "rationale": self.rationale, "category": self.category,
                "timestamp": self.timestamp}


@dataclass(frozen=True)
class EvalUser:
    user_id: str
    cutoff: int
    true_category: str


@dataclass(frozen=True)
class EvalSet:
    users: tuple[EvalUser, ...]


class FeedbackJudge(Protocol):
    def assess(self, record: FeedbackRecord) -> tuple[bool, bool] | None:
        """(relevant, seasonal) or None when the judge cannot decide."""


class RulePurifier:
    """Deterministic purification stand-in.

    Relevance: the record's category appears at least twice in the
    user's history.  Timeliness: any season keyword in the title must
    match the current or upcoming season at the record's timestamp.
    """

    def __init__(self, histories: dict[str, BehaviorLog]):
        self.histories = histories

    def assess(self, record: FeedbackRecord) -> tuple[bool, bool] | None:
        log = self.histories.get(record.user_id)
        if log is None:
            return None
        count = sum(1 for ev in log.events if ev.category_id == record.category)
        relevant = count >= 2
        month = datetime.fromtimestamp(record.timestamp, tz=timezone.utc).month
        season = lexicons.season_of_text(tokenize(record.item_title))
        seasonal = season is None or season in lexicons.compatible_seasons(month)
        return relevant, seasonal


@dataclass
class PurifyResult:
    kept: list[FeedbackRecord] = field(default_factory=list)
    dropped: list[tuple[FeedbackRecord, str]] = field(default_factory=list)
    review: list[FeedbackRecord] = field(default_factory=list)


def purify(records: Iterable[FeedbackRecord], judge: FeedbackJudge) -> PurifyResult:
    """Keep records judged relevant and seasonal; every drop carries a
    reason code; judge failures land in the review bucket, never
    silently dropped."""
    result = PurifyResult()
    for record in records:
        try:
            assessment = judge.assess(record)
        except Exception:
            assessment = None
        if assessment is None:
            result.review.append(record)
            continue
        relevant, seasonal = assessment
        if not relevant:
            result.dropped.append((record, "irrelevant"))
        elif not seasonal:
            result.dropped.append((record, "off_season"))
        else:
            result.kept.append(record)
    return result


class SampleCompleter(Protocol):
    def complete(self, record: FeedbackRecord,
                 profile: InterestProfile | None) -> tuple[str, str] | None:
        """(interest, rationale) or None on inference failure."""


class StubCompleter:
    """Derives the interest from the category->interest taxonomy."""

    def __init__(self, taxonomy: dict[str, str] | None = None):
        self.taxonomy = taxonomy if taxonomy is not None else dict(
            lexicons.DEFAULT_CATEGORY_INTERESTS)

    def complete(self, record: FeedbackRecord,
                 profile: InterestProfile | None) -> tuple[str, str] | None:
        interest = self.taxonomy.get(record.category)
        if interest is None and profile is not None and profile.interests:
            interest = profile.interests[0].label
        if interest is None:
            return None
        rationale = (f"User {record.behavior} of {record.item_title} supports "
                     f"the {interest} preference")
        return interest, rationale


@dataclass
class CompletionResult:
    samples: list[TrainingSample] = field(default_factory=list)
    skipped: int = 0


def complete(records: Iterable[FeedbackRecord], completer: SampleCompleter,
             profiles: dict[str, InterestProfile] | None = None) -> CompletionResult:
    """Map purified records to training samples; the item title is used
    verbatim as the tag."""
    profiles = profiles or {}
    result = CompletionResult()
    for record in records:
        inferred = completer.complete(record, profiles.get(record.user_id))
        if inferred is None:
            result.skipped += 1
            continue
        interest, rationale = inferred
        result.samples.append(TrainingSample(
            user_id=record.user_id,
            tag=record.item_title,
            interest=interest,
            rationale=rationale,
            category=record.category,
            timestamp=record.timestamp,
        ))
    return result


def _derived_rng(seed: int, user_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{user_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def balance(samples: list[TrainingSample], *,
            per_user_cap: int = PER_USER_CAP,
            per_cate_cap: int = PER_CATE_CAP,
            tag_to_cate: Callable[[str], str] | None = None,
            seed: int = 0,
            global_cate_cap: bool = False) -> list[TrainingSample]:
    """Two-stage seeded resampling.

    Stage 1 keeps up to ``per_user_cap`` distinct tags per user,
    sampled uniformly without replacement.  Stage 2 keeps at most
    ``per_cate_cap`` samples per category, per user by default or
    globally behind the flag.  Sampling derives a per-user seed so
    parallel execution order cannot change results.
    """
    by_user: dict[str, list[TrainingSample]] = {}
    for sample in samples:
        by_user.setdefault(sample.user_id, []).append(sample)

    stage1: list[TrainingSample] = []
    for user_id in sorted(by_user):
        user_samples = by_user[user_id]
        distinct_tags: list[str] = []
        seen: set[str] = set()
        for sample in user_samples:
            if sample.tag not in seen:
                seen.add(sample.tag)
                distinct_tags.append(sample.tag)
        if len(distinct_tags) > per_user_cap:
            rng = _derived_rng(seed, user_id)
            chosen = set(rng.sample(distinct_tags, per_user_cap))
        else:
            chosen = set(distinct_tags)
        stage1.extend(s for s in user_samples if s.tag in chosen)

    def category_of(sample: TrainingSample) -> str:
        if sample.category:
            return sample.category
        if tag_to_cate is not None:
            return tag_to_cate(sample.tag)
        return ""

    grouped: dict[tuple, list[TrainingSample]] = {}
    for sample in stage1:
        key = (category_of(sample),) if global_cate_cap \
            else (sample.user_id, category_of(sample))
        grouped.setdefault(key, []).append(sample)

    stage2: list[TrainingSample] = []
    for key in sorted(grouped):
        group = grouped[key]
        if len(group) > per_cate_cap:
            rng = _derived_rng(seed, "|".join(str(k) for k in key))
            group = rng.sample(group, per_cate_cap)
        stage2.extend(group)

    stage2.sort(key=lambda s: (s.user_id, category_of(s), s.tag, s.timestamp))
    return stage2


def hr_at_k(predictions: dict[str, list[str]] | Callable[[str], list[str]],
            phi: Callable[[str], str], eval_set: EvalSet, k: int = 30) -> float:
    """Fraction of users whose true next category appears among the
    categories of their top-k predicted tags."""
    if not eval_set.users:
        raise ValidationError("evaluation set is empty")
    hits = 0
    for user in eval_set.users:
        if callable(predictions):
            tags = predictions(user.user_id)
        else:
            tags = predictions.get(user.user_id, [])
        categories = {phi(tag) for tag in tags[:k]}
        if user.true_category in categories:
            hits += 1
    return hits / len(eval_set.users)


def make_eval_set(logs: dict[str, BehaviorLog], cutoff: int) -> EvalSet:
    """Ground truth = category of each user's first event strictly after
    the cutoff; users without one are excluded."""
    users = []
    for user_id in sorted(logs):
        for event in logs[user_id].events:
            if event.timestamp > cutoff and event.category_id:
                users.append(EvalUser(user_id=user_id, cutoff=cutoff,
                                      true_category=event.category_id))
                break
    return EvalSet(users=tuple(users))


def export_sft(samples: list[TrainingSample], path: Path | str) -> int:
    """Write prompt/response JSONL ready for an external tuning stack."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for sample in samples:
            prompt = (f"User {sample.user_id} recently interacted around "
                      f"category {sample.category}. Predict an item tag with "
                      f"its interest and rationale.")
            response = json.dumps({
                "Item Tag": sample.tag,
                "Interest": sample.interest,
                "Reason": sample.rationale,
            }, ensure_ascii=False)
            fh.write(json.dumps({"prompt": prompt, "response": response},
                                ensure_ascii=False) + "\n")
    return len(samples)
