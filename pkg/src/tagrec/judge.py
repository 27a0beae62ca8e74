"""Human-LLM cooperative judging.

Criterion schemas for the three generation tasks, an append-only judge
data buffer, deterministic rule judges for offline runs, an LLM-backed
judge, class rebalancing for judge fine-tuning exports, and the
human-vs-LLM agreement and drift metrics.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from . import lexicons
from .errors import ParseError, ValidationError
from .gateway import Gateway, LlmRequest, PromptTemplate, Task, _repair
from .textproc import text_length, tokenize


@dataclass(frozen=True)
class CriterionSchema:
    task: Task
    name: str
    labels: tuple[str, ...]
    passing: frozenset[str]
    help_text: str = ""

    def __post_init__(self) -> None:
        if not self.passing <= set(self.labels):
            raise ValidationError(
                f"passing labels {sorted(self.passing)} not all in scheme {self.labels}")


def binary_schema(task: Task, name: str, help_text: str = "") -> CriterionSchema:
    return CriterionSchema(task=task, name=name, labels=("Yes", "No"),
                           passing=frozenset({"Yes"}), help_text=help_text)


def multi_level_schema(task: Task, name: str, help_text: str = "") -> CriterionSchema:
    return CriterionSchema(task=task, name=name,
                           labels=("Excellent", "Good", "Bad"),
                           passing=frozenset({"Excellent", "Good"}),
                           help_text=help_text)


DEFAULT_SCHEMAS: dict[Task, tuple[CriterionSchema, ...]] = {
    Task.INTEREST_MINING: (
        CriterionSchema(
            task=Task.INTEREST_MINING, name="willingness",
            labels=("spontaneity", "necessity"),
            passing=frozenset({"spontaneity"}),
            help_text=("spontaneity: voluntary affection, e.g. tennis after buying a racket. "
                       "necessity: need-driven, e.g. restocking daily cleaning items."),
        ),
        CriterionSchema(
            task=Task.INTEREST_MINING, name="reasonableness",
            labels=("strong", "weak", "none", "hallucination"),
            passing=frozenset({"strong"}),
            help_text=("strong: behavior clearly supports the interest. "
                       "weak: only merch/apparel evidence, e.g. yoga pants for yoga. "
                       "none: reason unrelated to the interest. "
                       "hallucination: no behavioral evidence at all."),
        ),
    ),
    Task.TAG_PREDICTION: (
        binary_schema(Task.TAG_PREDICTION, "relevance",
                      "Tag matches its associated interest."),
        binary_schema(Task.TAG_PREDICTION, "consistency",
                      "Tag is grounded in the user's profile and history."),
        binary_schema(Task.TAG_PREDICTION, "specificity",
                      "Tag names a concrete product, not a broad class."),
        binary_schema(Task.TAG_PREDICTION, "validity",
                      "Tag corresponds to a product that actually exists."),
    ),
    Task.EXPLANATION: (
        multi_level_schema(Task.EXPLANATION, "relevance",
                           "Explanation speaks to the user's interest and the item."),
        multi_level_schema(Task.EXPLANATION, "factuality",
                           "No invented or exaggerated product claims."),
        multi_level_schema(Task.EXPLANATION, "clarity",
                           "Fluent, non-repetitive, and within the length rule."),
        multi_level_schema(Task.EXPLANATION, "safety",
                           "No personal information or hard-sell pressure."),
    ),
}


@dataclass(frozen=True)
class QualityVerdict:
    criteria: dict[str, str]
    passed: bool

    def to_wire(self) -> dict:
        return {"criteria": dict(self.criteria), "pass": self.passed}

    @classmethod
    def from_wire(cls, record: dict) -> "QualityVerdict":
        return cls(criteria=dict(record["criteria"]), passed=bool(record["pass"]))


def verdict_pass(schemas: Iterable[CriterionSchema], criteria: dict[str, str]) -> bool:
    """Pass iff every criterion label is a passing label for its scheme."""
    by_name = {schema.name: schema for schema in schemas}
    if set(by_name) != set(criteria):
        raise ValidationError(
            f"criteria {sorted(criteria)} do not match schemas {sorted(by_name)}")
    for name, label in criteria.items():
        if label not in by_name[name].labels:
            raise ValidationError(f"label {label!r} not in scheme for {name!r}")
    return all(label in by_name[name].passing for name, label in criteria.items())


def make_verdict(schemas: Iterable[CriterionSchema],
                 criteria: dict[str, str]) -> QualityVerdict:
    return QualityVerdict(criteria=dict(criteria),
                          passed=verdict_pass(schemas, criteria))


@dataclass
class JudgeSample:
    sample_id: str
    task: Task
    payload: dict
    round: int = 0
    created_at: float = 0.0
    human_verdict: QualityVerdict | None = None
    llm_verdict: QualityVerdict | None = None

    def __post_init__(self) -> None:
        if self.round < 0:
            raise ValidationError("round must be >= 0")

    def to_wire(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "task": self.task.value,
            "payload": self.payload,
            "round": self.round,
            "created_at": self.created_at,
        }

    @classmethod
    def from_wire(cls, record: dict) -> "JudgeSample":
        return cls(sample_id=record["sample_id"], task=Task(record["task"]),
                   payload=record["payload"], round=record.get("round", 0),
                   created_at=record.get("created_at", 0.0))


class JudgeProvider(Protocol):
    def evaluate(self, sample: JudgeSample,
                 schemas: tuple[CriterionSchema, ...]) -> dict[str, str] | None: ...


def judge_sample(sample: JudgeSample, schemas: tuple[CriterionSchema, ...],
                 provider: JudgeProvider) -> QualityVerdict | None:
    """One label per criterion from the provider; None routes the sample
    to the human queue instead of fabricating a verdict."""
    labels = provider.evaluate(sample, schemas)
    if labels is None:
        return None
    try:
        return make_verdict(schemas, labels)
    except ValidationError:
        return None


def _tokens(text: str) -> set[str]:
    return set(tokenize(text))


def _interest_field(label: str) -> set[str]:
    field_words = lexicons.INTEREST_FIELDS.get(label.lower(), set())
    return _tokens(label) | field_words


class RuleJudge:
    """Deterministic lexicon-backed judge used as the offline stand-in.

    Every heuristic is a stated proxy for the human criterion it mimics;
    the rules are tuned to the documented accept/reject exemplars and
    make no claim beyond fixture-scale behavior.
    """

    def evaluate(self, sample: JudgeSample,
                 schemas: tuple[CriterionSchema, ...]) -> dict[str, str] | None:
        if sample.task is Task.INTEREST_MINING:
            return self._interest(sample.payload)
        if sample.task is Task.TAG_PREDICTION:
            return self._tag(sample.payload)
        return self._explanation(sample.payload)

    def _interest(self, payload: dict) -> dict[str, str]:
        interest = payload.get("interest", "")
        reason = payload.get("reason", "")
        context = payload.get("context", "")
        combined = _tokens(interest) | _tokens(reason)
        if combined & lexicons.NECESSITY_TERMS:
            willingness = "necessity"
        else:
            willingness = "spontaneity"
        reason_tokens = _tokens(reason)
        context_tokens = _tokens(context)
        evidence = reason_tokens & context_tokens - {"user", "users", "the", "a", "with"}
        if not evidence:
            reasonableness = "hallucination"
        elif not (_interest_field(interest) & reason_tokens):
            reasonableness = "none"
        elif evidence & lexicons.WEAK_EVIDENCE_TERMS:
            reasonableness = "weak"
        else:
            reasonableness = "strong"
        return {"willingness": willingness, "reasonableness": reasonableness}

    def _tag(self, payload: dict) -> dict[str, str]:
        tag = payload.get("tag", "")
        interest = payload.get("interest", "")
        context = payload.get("context", "")
        profile_labels = [label.lower() for label in payload.get("profile_labels", [])]
        tag_tokens = _tokens(tag)
        relevance = "Yes" if tag_tokens & _interest_field(interest) else "No"
        grounded = bool(tag_tokens & _tokens(context))
        if profile_labels:
            grounded = grounded or interest.lower() in profile_labels
        consistency = "Yes" if grounded else "No"
        words = tokenize(tag)
        broad = (tag.lower() in lexicons.BROAD_CORE_TERMS
                 or bool(set(words[-2:]) & lexicons.BROAD_CORE_TERMS))
        specificity = "Yes" if len(words) >= 3 and not broad else "No"
        validity = "Yes" if payload.get("valid", True) else "No"
        return {"relevance": relevance, "consistency": consistency,
                "specificity": specificity, "validity": validity}

    def _explanation(self, payload: dict) -> dict[str, str]:
        explanation = payload.get("explanation", "")
        interest = payload.get("interest", "")
        title = payload.get("title", "")
        tokens = tokenize(explanation)
        token_set = set(tokens)

        relevance = "Good" if token_set & (_interest_field(interest) | _tokens(title)) else "Bad"
        exaggerated = token_set & {t.lower() for t in lexicons.EXAGGERATION_TERMS}
        factuality = "Bad" if exaggerated or "100" in token_set else "Good"
        length = text_length(explanation)
        repetitive = tokens and max(tokens.count(t) for t in token_set) >= 3
        clarity = "Bad" if repetitive or not 6 <= length <= 10 else "Good"
        hard_sell = any(term in explanation.lower() for term in lexicons.HARD_SELL_TERMS)
        named_person = re.search(r"\b(?:Ms|Mr|Mrs|Miss)[A-Z]\w+", explanation)
        safety = "Bad" if hard_sell or named_person else "Good"
        return {"relevance": relevance, "factuality": factuality,
                "clarity": clarity, "safety": safety}


_JUDGE_PROMPT = """# Role
You are a strict quality evaluator for generated shopping recommendations.

# Sample
Task: {{task}}
Payload: {{payload}}

# Criteria
{{criteria}}

# Output Format
Return a JSON object mapping each criterion name to exactly one of its labels:
{{output_keys}}
"""


class LlmJudge:
    """Gateway-backed judge; unparseable output yields None so the
    sample lands in the human queue."""

    def __init__(self, gateway: Gateway, seed: int | None = None):
        self.gateway = gateway
        self.seed = seed

    def evaluate(self, sample: JudgeSample,
                 schemas: tuple[CriterionSchema, ...]) -> dict[str, str] | None:
        criteria_text = "\n".join(
            f"- {schema.name}: one of {list(schema.labels)}. {schema.help_text}"
            for schema in schemas)
        template = PromptTemplate.from_text(sample.task, _JUDGE_PROMPT)
        request = LlmRequest(
            template=template,
            bindings={
                "task": sample.task.value,
                "payload": json.dumps(sample.payload, ensure_ascii=False, sort_keys=True),
                "criteria": criteria_text,
                "output_keys": json.dumps({s.name: "<label>" for s in schemas}),
            },
            seed=self.seed,
        )
        try:
            completion = self.gateway.complete(request)
            raw = completion.text
            try:
                data = json.loads(raw)
            except json.JSONDecodeError:
                repaired = _repair(raw)
                if repaired is None:
                    return None
                data = json.loads(repaired)
        except (ParseError, json.JSONDecodeError):
            return None
        if not isinstance(data, dict):
            return None
        return {str(k): str(v) for k, v in data.items()}


class JudgeBuffer:
    """Append-only sample + verdict log backing the judge workflow.

    Single writer, concurrent readers.  Verdict history is never
    rewritten; the latest verdict per source wins for reads.
    """

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._samples: dict[str, JudgeSample] = {}
        self._order: list[str] = []
        self._history: dict[str, dict[str, list[QualityVerdict]]] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._apply(json.loads(line))

    def _apply(self, record: dict) -> None:
        if record["type"] == "sample":
            sample = JudgeSample.from_wire(record["sample"])
            if sample.sample_id not in self._samples:
                self._order.append(sample.sample_id)
            self._samples[sample.sample_id] = sample
            self._history.setdefault(sample.sample_id, {"human": [], "llm": []})
        else:
            verdict = QualityVerdict.from_wire(record["verdict"])
            sample = self._samples[record["sample_id"]]
            self._history[record["sample_id"]][record["source"]].append(verdict)
            if record["source"] == "human":
                sample.human_verdict = verdict
            else:
                sample.llm_verdict = verdict

    def _append(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def enqueue(self, samples: JudgeSample | Iterable[JudgeSample]) -> None:
        if isinstance(samples, JudgeSample):
            samples = [samples]
        with self._lock:
            for sample in samples:
                if not sample.created_at:
                    sample.created_at = time.time()
                record = {"type": "sample", "sample": sample.to_wire()}
                self._apply(record)
                self._append(record)

    def _record(self, source: str, sample_id: str, verdict: QualityVerdict) -> None:
        with self._lock:
            if sample_id not in self._samples:
                raise ValidationError(f"unknown sample_id {sample_id!r}")
            record = {"type": "verdict", "source": source, "sample_id": sample_id,
                      "verdict": verdict.to_wire(), "recorded_at": time.time()}
            self._apply(record)
            self._append(record)

    def record_human_verdict(self, sample_id: str, verdict: QualityVerdict) -> None:
        self._record("human", sample_id, verdict)

    def record_llm_verdict(self, sample_id: str, verdict: QualityVerdict) -> None:
        self._record("llm", sample_id, verdict)

    def get(self, sample_id: str) -> JudgeSample:
        with self._lock:
            if sample_id not in self._samples:
                raise ValidationError(f"unknown sample_id {sample_id!r}")
            return self._samples[sample_id]

    def samples(self, task: Task | None = None) -> list[JudgeSample]:
        with self._lock:
            out = [self._samples[sid] for sid in self._order]
        if task is not None:
            out = [s for s in out if s.task is task]
        return out

    def pending_human(self, task: Task | None = None,
                      limit: int | None = None) -> list[JudgeSample]:
        pending = [s for s in self.samples(task) if s.human_verdict is None]
        pending.sort(key=lambda s: s.created_at)
        return pending[:limit] if limit is not None else pending

    def history(self, sample_id: str, source: str) -> list[QualityVerdict]:
        with self._lock:
            if sample_id not in self._history:
                raise ValidationError(f"unknown sample_id {sample_id!r}")
            return list(self._history[sample_id][source])

    def doubly_labeled(self, task: Task | None = None) -> list[JudgeSample]:
        return [s for s in self.samples(task)
                if s.human_verdict is not None and s.llm_verdict is not None]


@dataclass(frozen=True)
class RebalanceConfig:
    ratio: float = 1.0          # majority : minority target
    half_life: float = 1.0      # rounds until a sample's weight halves
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ratio <= 0:
            raise ValidationError("ratio must be positive")


@dataclass
class RebalanceResult:
    samples: list[JudgeSample]
    counts: dict[str, dict[str, int]]
    warnings: list[str] = field(default_factory=list)


def _weighted_sample(items: list[JudgeSample], weights: list[float],
                     count: int, rng: random.Random) -> list[JudgeSample]:
    """Weighted sampling without replacement (exponential-key trick)."""
    keyed = [(rng.random() ** (1.0 / w), item) for w, item in zip(weights, items)]
    keyed.sort(key=lambda pair: pair[0], reverse=True)
    return [item for _, item in keyed[:count]]


def rebalance(buffer: JudgeBuffer, cfg: RebalanceConfig) -> RebalanceResult:
    """Per task: keep every minority-class sample across all rounds and
    downsample the majority class with recency weighting 2^(-age/half_life)."""
    result = RebalanceResult(samples=[], counts={})
    for task in Task:
        labeled = [s for s in buffer.samples(task) if s.human_verdict is not None]
        if not labeled:
            continue
        passes = [s for s in labeled if s.human_verdict.passed]
        fails = [s for s in labeled if not s.human_verdict.passed]
        if not passes or not fails:
            result.warnings.append(
                f"{task.value}: one class is empty "
                f"(pass={len(passes)}, fail={len(fails)}); exporting as-is")
            chosen = passes or fails
            result.samples.extend(chosen)
            result.counts[task.value] = {"pass": len(passes), "fail": len(fails)}
            continue
        minority, majority = (passes, fails) if len(passes) < len(fails) else (fails, passes)
        if len(passes) == len(fails):
            minority, majority = fails, passes
        target = min(len(majority), round(len(minority) * cfg.ratio))
        max_round = max(s.round for s in labeled)
        weights = [2.0 ** (-(max_round - s.round) / cfg.half_life) for s in majority]
        seed_digest = int.from_bytes(
            hashlib.sha256(f"{cfg.seed}:{task.value}".encode()).digest()[:8], "big")
        rng = random.Random(seed_digest)
        kept_majority = _weighted_sample(majority, weights, target, rng)
        chosen = list(minority) + kept_majority
        chosen.sort(key=lambda s: s.sample_id)
        result.samples.extend(chosen)
        minority_name = "pass" if minority is passes else "fail"
        result.counts[task.value] = {
            minority_name: len(minority),
            ("fail" if minority_name == "pass" else "pass"): len(kept_majority),
        }
    return result


@dataclass(frozen=True)
class AgreementMetrics:
    n: int
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def to_wire(self) -> dict:
        return {"n": self.n, "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "tn": self.tn, "accuracy": self.accuracy,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def agreement(pairs: list[tuple[bool, bool]]) -> AgreementMetrics:
    """Confusion-matrix metrics of LLM verdicts against human verdicts.

    ``pairs`` holds (human_pass, llm_pass); human pass is the positive
    class.  Undefined ratios are None, never coerced to zero.
    """
    if not pairs:
        raise ValidationError("agreement needs at least one doubly-labeled sample")
    tp = sum(1 for h, l in pairs if h and l)
    fp = sum(1 for h, l in pairs if not h and l)
    fn = sum(1 for h, l in pairs if h and not l)
    tn = sum(1 for h, l in pairs if not h and not l)
    n = len(pairs)
    accuracy = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return AgreementMetrics(n=n, tp=tp, fp=fp, fn=fn, tn=tn, accuracy=accuracy,
                            precision=precision, recall=recall, f1=f1)


def buffer_agreement(buffer: JudgeBuffer, task: Task) -> AgreementMetrics | None:
    labeled = buffer.doubly_labeled(task)
    if not labeled:
        return None
    pairs = [(s.human_verdict.passed, s.llm_verdict.passed) for s in labeled]
    return agreement(pairs)


@dataclass(frozen=True)
class DriftReport:
    status: str                 # "ok" | "retrain_required"
    baseline_accuracy: float
    window_accuracy: float
    delta: float
    window_size: int
    low_confidence: bool

    def to_wire(self) -> dict:
        return {"status": self.status, "baseline_accuracy": self.baseline_accuracy,
                "window_accuracy": self.window_accuracy, "delta": self.delta,
                "window_size": self.window_size, "low_confidence": self.low_confidence}


def drift_check(window: AgreementMetrics, baseline: AgreementMetrics,
                delta: float = 0.05, min_window: int = 10) -> DriftReport:
    """Retrain when baseline accuracy exceeds window accuracy by more
    than delta; tiny windows are flagged rather than suppressed."""
    if window.n < 1 or window.accuracy is None or baseline.accuracy is None:
        raise ValidationError("drift check needs non-empty window and baseline")
    degraded = baseline.accuracy - window.accuracy > delta
    return DriftReport(
        status="retrain_required" if degraded else "ok",
        baseline_accuracy=baseline.accuracy,
        window_accuracy=window.accuracy,
        delta=delta,
        window_size=window.n,
        low_confidence=window.n < min_window,
    )
