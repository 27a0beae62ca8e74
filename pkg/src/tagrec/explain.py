"""Recommendation explanations: offline generation over matched
interest-item pairs, a keyed lookup table, and constant-time online
lookup with a deterministic fallback."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .catalog import Catalog, Product
from .errors import TagrecError, ValidationError
from .gateway import Gateway, LlmRequest, PromptTemplate, Task
from .interests import InterestProfile
from .judge import DEFAULT_SCHEMAS, JudgeProvider, JudgeSample, judge_sample
from .judge import QualityVerdict, make_verdict
from .textproc import text_length

LENGTH_MIN = 6
LENGTH_MAX = 10


@dataclass(frozen=True)
class ExplanationEntry:
    interest: str
    item_id: str
    explanation: str
    generated_at: int
    verdict: QualityVerdict | None = None
    fallback: bool = False

    @property
    def length_ok(self) -> bool:
        return LENGTH_MIN <= text_length(self.explanation) <= LENGTH_MAX

    def to_wire(self) -> dict:
        record = {"interest": self.interest, "item_id": self.item_id,
                  "explanation": self.explanation,
                  "generated_at": self.generated_at}
        if self.verdict is not None:
            record["verdict"] = self.verdict.to_wire()
        if self.fallback:
            record["fallback"] = True
        return record

    @classmethod
    def from_wire(cls, record: dict) -> "ExplanationEntry":
        verdict = record.get("verdict")
        return cls(interest=record["interest"], item_id=record["item_id"],
                   explanation=record["explanation"],
                   generated_at=record["generated_at"],
                   verdict=QualityVerdict.from_wire(verdict) if verdict else None,
                   fallback=record.get("fallback", False))


def generate_explanation(gateway: Gateway, interest: str, product: Product,
                         date_ts: int, *, judge: JudgeProvider | None = None,
                         seed: int | None = None) -> ExplanationEntry:
    """One prompt round for an (interest, item) pair.

    A length violation forces the clarity criterion to fail even when
    the judge would pass it.
    """
    template = PromptTemplate.load(Task.EXPLANATION)
    date_text = datetime.fromtimestamp(date_ts, tz=timezone.utc).strftime("%Y-%m-%d")
    request = LlmRequest(
        template=template,
        bindings={
            "user_interest": interest,
            "date_information": date_text,
            "item_information": product.info_text(),
        },
        seed=seed,
    )
    result = gateway.run(request)
    text = result.entries[0].explanation
    entry = ExplanationEntry(interest=interest, item_id=product.item_id,
                             explanation=text, generated_at=date_ts)
    schemas = DEFAULT_SCHEMAS[Task.EXPLANATION]
    verdict = None
    if judge is not None:
        sample = JudgeSample(
            sample_id=f"{interest}:{product.item_id}",
            task=Task.EXPLANATION,
            payload={"explanation": text, "interest": interest,
                     "title": product.title},
        )
        verdict = judge_sample(sample, schemas, judge)
    if not entry.length_ok:
        criteria = dict(verdict.criteria) if verdict else {
            s.name: "Good" for s in schemas}
        criteria["clarity"] = "Bad"
        verdict = make_verdict(schemas, criteria)
    return replace(entry, verdict=verdict)


def derive_interest_links(tag_sets: Iterable, phi: Callable[[str], str],
                          overrides: dict[str, set[str]] | None = None
                          ) -> dict[str, set[str]]:
    """Interest -> categories, from accumulated (tag, interest) pairs
    mapped through phi, with manual overrides merged on top."""
    links: dict[str, set[str]] = {}
    for tag_set in tag_sets:
        for triplet in tag_set.triplets:
            links.setdefault(triplet.interest, set()).add(phi(triplet.tag))
    for interest, categories in (overrides or {}).items():
        links.setdefault(interest, set()).update(categories)
    return links


def pair_candidates(profiles: Iterable[InterestProfile], catalog: Catalog,
                    links: dict[str, set[str]]
                    ) -> tuple[list[tuple[str, str]], list[str]]:
    """Matched (interest, item_id) pairs via shared categories.

    Returns the deduplicated, deterministically ordered pair list plus
    a report of interests that had no category link.
    """
    interests: list[str] = []
    seen: set[str] = set()
    for profile in profiles:
        for entry in profile.interests:
            if entry.label not in seen:
                seen.add(entry.label)
                interests.append(entry.label)
    by_category = catalog.categories()
    pairs: set[tuple[str, str]] = set()
    skipped: list[str] = []
    for interest in interests:
        categories = links.get(interest)
        if not categories:
            skipped.append(interest)
            continue
        for category in categories:
            for product in by_category.get(category, []):
                pairs.add((interest, product.item_id))
    return sorted(pairs), skipped


class ExplanationTable:
    """Entries keyed by (interest, item_id); inserts are idempotent."""

    def __init__(self) -> None:
        self.entries: dict[tuple[str, str], ExplanationEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self.entries

    def get(self, interest: str, item_id: str) -> ExplanationEntry | None:
        return self.entries.get((interest, item_id))

    def add(self, entry: ExplanationEntry) -> bool:
        """False when the key already exists (duplicate skipped)."""
        key = (entry.interest, entry.item_id)
        if key in self.entries:
            return False
        self.entries[key] = entry
        return True

    def save(self, path: Path | str) -> None:
        """JSONL of entries plus a sidecar index of key -> line number."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index: dict[str, int] = {}
        with path.open("w", encoding="utf-8") as fh:
            for line_no, key in enumerate(sorted(self.entries)):
                entry = self.entries[key]
                fh.write(json.dumps(entry.to_wire(), ensure_ascii=False) + "\n")
                index["\x1f".join(key)] = line_no
        sidecar = path.with_suffix(path.suffix + ".index.json")
        sidecar.write_text(json.dumps(index, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "ExplanationTable":
        table = cls()
        path = Path(path)
        if not path.exists():
            return table
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    table.add(ExplanationEntry.from_wire(json.loads(line)))
        return table


@dataclass
class BuildReport:
    generated: int = 0
    skipped_existing: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


def build_table(table: ExplanationTable, pairs: list[tuple[str, str]],
                generator: Callable[[str, str], ExplanationEntry]) -> BuildReport:
    """Resumable batch generation: keys already present are skipped and
    failures leave the table valid."""
    report = BuildReport()
    for interest, item_id in pairs:
        if (interest, item_id) in table:
            report.skipped_existing += 1
            continue
        try:
            entry = generator(interest, item_id)
        except TagrecError as err:
            report.failures.append((f"{interest}/{item_id}", str(err)))
            continue
        table.add(entry)
        report.generated += 1
    return report


def fallback_entry(product: Product, now: int) -> ExplanationEntry:
    """Deterministic item-quality fallback: the title truncated to the
    length rule."""
    kept: list[str] = []
    length = 0
    for ch in product.title:
        candidate = "".join(kept) + ch
        candidate_len = text_length(candidate)
        if candidate_len > LENGTH_MAX:
            break
        kept.append(ch)
        length = candidate_len
    text = "".join(kept).strip() or product.title[:LENGTH_MAX]
    return ExplanationEntry(interest="", item_id=product.item_id,
                            explanation=text, generated_at=now, fallback=True)


def lookup(table: ExplanationTable, item_id: str, profile: InterestProfile,
           product: Product, now: int | None = None) -> ExplanationEntry:
    """First passing (interest, item) entry in profile order, else the
    fallback.  Never triggers generation."""
    for entry in profile.passed():
        hit = table.get(entry.label, item_id)
        if hit is not None and hit.verdict is not None and hit.verdict.passed:
            return hit
    return fallback_entry(product, int(now if now is not None else time.time()))
