"""Provider-agnostic chat-completion gateway.

One template per task with ``{{name}}`` placeholders, exact-substitution
instantiation, response caching keyed by content hash, bounded retries,
and a strict-then-repair structured-output parser.  Two providers are
built in: an OpenAI-compatible HTTP endpoint and a deterministic stub
that generates schema-valid fixtures for tests and offline runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Protocol

from .errors import (ContentError, ParseError, PromptTooLongError,
                     TemplateError, TransportError)
from .textproc import token_count

DEFAULT_CONTEXT_LIMIT = 128_000


class Task(str, Enum):
    INTEREST_MINING = "interest_mining"
    TAG_PREDICTION = "tag_prediction"
    EXPLANATION = "explanation"


_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    task: Task
    body: str
    required_placeholders: frozenset[str]

    def __post_init__(self) -> None:
        found = _PLACEHOLDER.findall(self.body)
        for name in self.required_placeholders:
            if found.count(name) != 1:
                raise TemplateError(
                    f"placeholder {name!r} must occur exactly once, found {found.count(name)}")

    @classmethod
    def from_text(cls, task: Task, body: str) -> "PromptTemplate":
        return cls(task=task, body=body,
                   required_placeholders=frozenset(_PLACEHOLDER.findall(body)))

    @classmethod
    def load(cls, task: Task, directory: Path | None = None) -> "PromptTemplate":
        if directory is not None:
            body = (directory / f"{task.value}.txt").read_text(encoding="utf-8")
        else:
            body = (resources.files("tagrec") / "templates" / f"{task.value}.txt"
                    ).read_text(encoding="utf-8")
        return cls.from_text(task, body)


def instantiate(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Exact substitution of every required placeholder."""
    missing = sorted(template.required_placeholders - bindings.keys())
    if missing:
        raise TemplateError(f"missing binding for placeholder {missing[0]!r}")

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise TemplateError(f"missing binding for placeholder {name!r}")
        return str(bindings[name])

    return _PLACEHOLDER.sub(sub, template.body)


@dataclass(frozen=True)
class LlmRequest:
    template: PromptTemplate
    bindings: dict[str, str]
    max_output_tokens: int = 4096
    temperature: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise TemplateError(f"temperature {self.temperature} outside [0, 2]")


@dataclass(frozen=True)
class Completion:
    text: str
    usage: dict


@dataclass(frozen=True)
class ParsedInterest:
    id: str
    interest: str
    stage: str
    reason: str


@dataclass(frozen=True)
class ParsedTag:
    tag: str
    interest: str
    reason: str


@dataclass(frozen=True)
class ParsedExplanation:
    explanation: str


@dataclass(frozen=True)
class ParseResult:
    entries: tuple
    mode: str  # "strict" | "repaired"


def _lookup(record: dict, *names: str) -> str | None:
    folded = {key.lower().replace(" ", "").replace("_", ""): value
              for key, value in record.items()}
    for name in names:
        value = folded.get(name)
        if value is not None:
            return str(value)
    return None


def _to_entries(task: Task, data, raw: str) -> tuple:
    if task is Task.EXPLANATION:
        if not isinstance(data, dict):
            raise ParseError("explanation output must be a JSON object", raw=raw)
        # The template's output key is historically misspelled; accept both.
        text = _lookup(data, "explation", "explanation")
        if not text:
            raise ParseError("explanation output missing text", raw=raw)
        return (ParsedExplanation(explanation=text),)
    if not isinstance(data, list):
        raise ParseError(f"{task.value} output must be a JSON array", raw=raw)
    entries = []
    for record in data:
        if not isinstance(record, dict):
            raise ParseError("array entry is not an object", raw=raw)
        if task is Task.INTEREST_MINING:
            interest = _lookup(record, "interest")
            reason = _lookup(record, "reason")
            if not interest or not reason:
                raise ParseError("interest entry missing interest/reason", raw=raw)
            entries.append(ParsedInterest(
                id=_lookup(record, "id") or "",
                interest=interest,
                stage=_lookup(record, "stage") or "",
                reason=reason,
            ))
        else:
            tag = _lookup(record, "itemtag", "tag")
            interest = _lookup(record, "interest")
            reason = _lookup(record, "reason")
            if not tag or not interest or not reason:
                raise ParseError("tag entry missing tag/interest/reason", raw=raw)
            entries.append(ParsedTag(tag=tag, interest=interest, reason=reason))
    return tuple(entries)


_TRAILING_COMMA = re.compile(r",\s*(?=[}\]])")


def _repair(raw: str) -> str | None:
    """Single-shot conservative repair: strip surrounding prose and
    trailing commas.  Returns None when no bracketed block exists."""
    starts = [idx for idx in (raw.find("["), raw.find("{")) if idx != -1]
    ends = [idx for idx in (raw.rfind("]"), raw.rfind("}")) if idx != -1]
    if not starts or not ends:
        return None
    start, end = min(starts), max(ends)
    if end <= start:
        return None
    return _TRAILING_COMMA.sub("", raw[start:end + 1])


def parse_structured(task: Task, raw: str) -> ParseResult:
    """Strict JSON parse, then one repair attempt; never two."""
    try:
        return ParseResult(entries=_to_entries(task, json.loads(raw), raw), mode="strict")
    except (json.JSONDecodeError, ParseError):
        pass
    repaired = _repair(raw)
    if repaired is None:
        raise ParseError("no structured block found", raw=raw)
    try:
        return ParseResult(entries=_to_entries(task, json.loads(repaired), raw),
                           mode="repaired")
    except json.JSONDecodeError as err:
        raise ParseError(f"unparseable after repair: {err.msg}", raw=raw) from None


class Provider(Protocol):
    name: str

    def generate(self, request: LlmRequest, prompt: str) -> str: ...


class HttpProvider:
    """OpenAI-compatible chat-completion endpoint over HTTP POST."""

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "default", timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("LLM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("LLM_API_KEY", "")
        self.model = model
        self.timeout = timeout
        self.name = f"http:{self.endpoint}:{self.model}"
        if not self.endpoint:
            raise ContentError("no endpoint configured (set LLM_ENDPOINT)")

    def generate(self, request: LlmRequest, prompt: str) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        data = json.dumps(body).encode("utf-8")
        http_request = urllib.request.Request(
            self.endpoint, data=data,
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {self.api_key}"})
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError) as err:
            raise TransportError(str(err)) from err
        try:
            message = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ContentError(f"unexpected response shape: {payload!r}") from None
        if message is None:
            raise ContentError("provider returned empty content")
        return message


def _digest(*parts) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


_STAGES = ("long-term", "recent", "emerging", "stable")

_EXTRA_INTERESTS = (
    "street photography", "home barista", "indoor gardening", "vinyl collecting",
    "trail running", "calligraphy", "aquarium keeping", "bread baking",
    "film restoration", "drone piloting", "leathercraft", "astronomy",
)

_TAG_MODIFIERS = (
    "premium lightweight", "ergonomic foldable", "handcrafted durable",
    "compact travel", "professional tournament", "breathable quick-dry",
    "insulated stainless", "adjustable portable", "rechargeable cordless",
    "waterproof ripstop",
)

_TAG_CORES = (
    "hiking boots", "wall clock", "yoga mat", "tennis racket", "iron skillet",
    "cat scratcher", "wool scarf", "linen shorts", "chess board", "face serum",
    "camping lantern", "storage bench", "tea kettle", "desk organizer",
)

_EXPLANATIONS = (
    "轻便出行好伙伴", "夏日清凉好选择", "旅途收纳小能手", "厨房烟火气满分",
    "球场致胜新装备", "暖冬出街保暖利器", "居家点缀小心思", "毛孩子的新宠",
    "Trail buddy", "Cozy nights",
)

_LONG_EXPLANATION = "这个产品非常好用大家都会喜欢它的"


class StubProvider:
    """Deterministic fixture generator for offline runs and tests.

    Output is a pure function of (task, prompt hash, request seed,
    provider seed); knobs force specific pathologies for negative
    tests: ``malformed`` (prose-wrapped JSON with trailing commas),
    ``tag_count``, ``interest_count``, ``duplicate_interest``,
    ``hallucinated_tag``, and ``long_explanation``.
    """

    name = "stub"

    def __init__(self, seed: int = 0, knobs: dict | None = None):
        self.seed = seed
        self.knobs = dict(knobs or {})

    def _names_from_sequences(self, bindings: dict[str, str]) -> list[str]:
        names: list[str] = []
        for key in ("compressed_behaviors", "click_sequence",
                    "purchase_sequence", "search_sequence"):
            text = bindings.get(key, "")
            for line in text.splitlines():
                _, _, items = line.partition(" | ")
                for chunk in (items or line).split(", "):
                    name = chunk.split(" [")[0].strip()
                    if name and name.lower() not in ("none", "-"):
                        names.append(name)
        return names

    def generate(self, request: LlmRequest, prompt: str) -> str:
        key = _digest(self.seed, request.seed or 0, prompt)
        task = request.template.task
        if task is Task.INTEREST_MINING:
            payload = self._interests(request.bindings, key)
        elif task is Task.TAG_PREDICTION:
            payload = self._tags(request.bindings, key)
        else:
            payload = self._explanation(key)
        if self.knobs.get("malformed"):
            payload = payload.rstrip()
            # Trailing comma before the closing bracket defeats strict
            # parsing; the surrounding prose defeats naive json.loads.
            payload = re.sub(r"(\})(\s*[\]\}]?)$", r"\1,\2", payload, count=1) \
                if payload.endswith(("]", "}")) else payload
            return f"Here is the result you asked for: {payload} Hope this helps!"
        return payload

    def _interests(self, bindings: dict[str, str], key: int) -> str:
        count = int(self.knobs.get("interest_count", 12))
        pool = [label.strip() for label in bindings.get("interest_pool", "").split(",")
                if label.strip()]
        evidence = self._names_from_sequences(bindings)
        labels = list(pool)
        for extra in _EXTRA_INTERESTS:
            if len(labels) >= count:
                break
            if extra not in labels:
                labels.append(extra)
        labels = labels[:count]
        if self.knobs.get("duplicate_interest") and labels:
            labels.append(labels[0])
        records = []
        for index, label in enumerate(labels):
            if index < len(pool) and evidence:
                anchor = evidence[(key + index) % len(evidence)]
                reason = f"Sustained activity around {anchor} shows {label} affection"
            else:
                reason = f"Exploring {label} without supporting history yet"
            records.append({
                "ID": f"matched interest_{index + 1:02d}",
                "Interest": label,
                "Stage": _STAGES[(key + index) % len(_STAGES)],
                "Reason": reason,
            })
        return json.dumps(records, ensure_ascii=False, indent=1)

    def _tags(self, bindings: dict[str, str], key: int) -> str:
        count = int(self.knobs.get("tag_count", 50))
        interests = [label.strip() for label in bindings.get("user_interests", "").split(",")
                     if label.strip()] or ["general shopping"]
        cores = list(_TAG_CORES)
        for name in self._names_from_sequences(bindings):
            words = name.split()
            if len(words) >= 2:
                cores.append(" ".join(words[-2:]).lower())
        records = []
        seen = set()
        index = 0
        total = len(_TAG_MODIFIERS) * len(cores)
        while len(records) < count and index < total:
            # Walk the modifier x core grid so pairs never cycle early.
            modifier = _TAG_MODIFIERS[(key + index // len(cores)) % len(_TAG_MODIFIERS)]
            core = cores[(key // 7 + index) % len(cores)]
            tag = f"{modifier} {core}"
            index += 1
            if tag in seen:
                continue
            seen.add(tag)
            interest = interests[(key + len(records)) % len(interests)]
            records.append({
                "Item Tag": tag,
                "Interest": interest,
                "Reason": f"Recent {core} engagement matches the {interest} preference",
            })
        if self.knobs.get("hallucinated_tag") and records:
            records[0] = {
                "Item Tag": "antigravity levitating planter",
                "Interest": "quantum gardening",
                "Reason": "Implied by no observable behavior",
            }
        if self.knobs.get("duplicate_tag") and len(records) >= 2:
            records[1]["Item Tag"] = records[0]["Item Tag"].upper()
        return json.dumps(records, ensure_ascii=False, indent=1)

    def _explanation(self, key: int) -> str:
        if self.knobs.get("long_explanation"):
            text = _LONG_EXPLANATION
        else:
            text = _EXPLANATIONS[key % len(_EXPLANATIONS)]
        return json.dumps({"Explation": text}, ensure_ascii=False)


class Gateway:
    """Front door for all completions: budget guard, cache, retries."""

    def __init__(self, provider: Provider, *,
                 context_limit: int = DEFAULT_CONTEXT_LIMIT,
                 max_retries: int = 2,
                 backoff_base: float = 0.5,
                 cache_dir: Path | None = None,
                 max_in_flight: int = 8):
        self.provider = provider
        self.context_limit = context_limit
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._memory_cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self._slots = threading.Semaphore(max_in_flight)
        self.provider_calls = 0
        self.cache_enabled = True

    def _cache_key(self, prompt: str, request: LlmRequest) -> str:
        joined = "\x1f".join([self.provider.name, prompt,
                              repr(request.temperature), repr(request.seed)])
        return hashlib.sha256(joined.encode("utf-8")).hexdigest()

    def _cache_get(self, key: str) -> str | None:
        with self._lock:
            if key in self._memory_cache:
                return self._memory_cache[key]
        if self.cache_dir:
            path = self.cache_dir / f"{key}.json"
            if path.exists():
                text = json.loads(path.read_text(encoding="utf-8"))["text"]
                with self._lock:
                    self._memory_cache[key] = text
                return text
        return None

    def _cache_put(self, key: str, text: str) -> None:
        with self._lock:
            self._memory_cache[key] = text
        if self.cache_dir:
            path = self.cache_dir / f"{key}.json"
            path.write_text(json.dumps({"text": text}, ensure_ascii=False),
                            encoding="utf-8")

    def complete(self, request: LlmRequest) -> Completion:
        prompt = instantiate(request.template, request.bindings)
        prompt_tokens = token_count(prompt)
        if prompt_tokens > self.context_limit:
            raise PromptTooLongError(
                f"prompt is {prompt_tokens} tokens, limit {self.context_limit}")
        cache_key = self._cache_key(prompt, request)
        if self.cache_enabled:
            cached = self._cache_get(cache_key)
            if cached is not None:
                return Completion(text=cached, usage={
                    "prompt_tokens": prompt_tokens, "cached": True, "attempts": 0})
        last_error: Exception | None = None
        with self._slots:
            for attempt in range(self.max_retries + 1):
                try:
                    self.provider_calls += 1
                    text = self.provider.generate(request, prompt)
                    break
                except TransportError as err:
                    last_error = err
                    if attempt < self.max_retries:
                        time.sleep(self.backoff_base * (2 ** attempt))
            else:
                raise TransportError(
                    f"exhausted {self.max_retries + 1} attempts: {last_error}")
        if self.cache_enabled:
            self._cache_put(cache_key, text)
        return Completion(text=text, usage={
            "prompt_tokens": prompt_tokens, "cached": False, "attempts": 1})

    def run(self, request: LlmRequest) -> ParseResult:
        """Complete then parse; parse failures carry the raw text."""
        completion = self.complete(request)
        return parse_structured(request.template.task, completion.text)
