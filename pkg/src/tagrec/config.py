"""Pipeline configuration: one flat key/value file, bit-exact grammar.

Grammar, line by line: blank lines and lines starting with ``#`` are
ignored; everything else is ``key = value`` with a single ``=``.  Keys
are the dataclass field names; values parse by the field's type
(int/float/bool/str).  ``save`` writes fields in declaration order, so
load(save(cfg)) round-trips exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError


@dataclass
class PipelineConfig:
    store_dir: str = "store/events"
    artifacts_dir: str = "store/artifacts"
    catalog_path: str = "store/catalog.json"
    users_path: str = "store/users.json"
    provider: str = "stub"              # stub | http
    token_budget: int = 128_000
    pool_size: int = 30
    min_tags: int = 50
    interest_floor: int = 10
    alpha: float = 0.5
    beta: float = 0.5
    k_negatives: int = 8
    embed_dim: int = 16
    output_dim: int = 32
    train_steps: int = 200
    batch_size: int = 16
    learning_rate: float = 0.2
    seed: int = 0
    per_user_cap: int = 80
    per_cate_cap: int = 2
    judge_delta: float = 0.05
    judge_gate: float = 0.90
    validity_threshold: float = 0.0
    top_k: int = 10
    bind_host: str = "127.0.0.1"
    bind_port: int = 8787
    console_dir: str = ""
    now: int = 0                        # 0 means wall clock

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must be in [0, 1]")
        if self.token_budget <= 0:
            raise ValidationError("token_budget must be positive")
        if self.provider not in ("stub", "http"):
            raise ValidationError(f"unknown provider {self.provider!r}")
        for name in ("pool_size", "min_tags", "k_negatives", "per_user_cap",
                     "per_cate_cap", "top_k", "train_steps", "batch_size"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def save_config(cfg: PipelineConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# tagrec pipeline configuration"]
    for field in dataclasses.fields(PipelineConfig):
        value = getattr(cfg, field.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{field.name} = {rendered}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        if raw not in ("true", "false"):
            raise ValidationError(f"{field.name}: expected true/false, got {raw!r}")
        return raw == "true"
    return raw


def load_config(path: Path | str) -> PipelineConfig:
    values: dict[str, object] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"line {line_no}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELDS:
            raise ValidationError(f"line {line_no}: unknown key {key!r}")
        try:
            values[key] = _parse_value(_FIELDS[key], raw)
        except ValueError as err:
            raise ValidationError(f"line {line_no}: {err}") from None
    return PipelineConfig(**values)
