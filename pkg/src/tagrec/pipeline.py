"""End-to-end orchestration of the full loop: compress, mine interests,
predict tags, retrieve with fused scores, and attach explanations.

Every stage persists its artifact and is skipped on re-run when the
artifact already exists, so deleting one file regenerates exactly that
stage.  With the stub provider and a pinned ``now``, bundles are
byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lexicons
from .catalog import Catalog
from .compression import compress
from .config import PipelineConfig
from .errors import StageError, TagrecError
from .events import BehaviorKind, EventStore, reliable_filter
from .explain import (ExplanationTable, build_table, derive_interest_links,
                      generate_explanation, lookup, pair_candidates)
from .gateway import Gateway, HttpProvider, Provider, StubProvider
from .interests import (InterestProfile, InterestPool, ProfileStore,
                        UserAttributes, match_pool, mine_interests,
                        screen_interests)
from .judge import RuleJudge
from .retrieval import (EmbeddedCatalog, FusionConfig, Interaction, LossConfig,
                        ModelConfig, RetrievalDataset, TriTowerModel,
                        ValidityChecker, embed_tag, embed_user, fuse,
                        load_model, retrieve_topk, save_model, train)
from .tags import TagPredictionSet, TagSetStore, behavior_views, predict_tags, validate_set
from .taxonomy import CategoryTaxonomy, TagMapper, build_taxonomy

_CLICK_KINDS = (BehaviorKind.ORDINARY_CLICK, BehaviorKind.DETAIL_VIEW,
                BehaviorKind.FAVORITE, BehaviorKind.ADD_TO_CART)


@dataclass(frozen=True)
class BundleItem:
    item_id: str
    score: float
    explanation: str
    fallback: bool

    def to_wire(self) -> dict:
        return {"item_id": self.item_id, "score": round(self.score, 9),
                "explanation": self.explanation, "fallback": self.fallback}


@dataclass(frozen=True)
class RecommendationBundle:
    user_id: str
    items: tuple[BundleItem, ...]
    trace: dict

    def to_wire(self) -> dict:
        return {"user_id": self.user_id,
                "items": [item.to_wire() for item in self.items],
                "trace": self.trace}

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_wire(), ensure_ascii=False,
                          sort_keys=True).encode("utf-8")


def dataset_from_store(store: EventStore, catalog: Catalog) -> RetrievalDataset:
    """Positives are click-style and purchase events over catalog items;
    the training tag of an item is its lowercased title."""
    items = {p.item_id: p.features() for p in catalog.ordered()}
    interactions: list[Interaction] = []
    sequences: dict[str, dict[str, list[str]]] = {}
    for user_id in store.user_ids():
        slots: dict[str, list[str]] = {"click": [], "purchase": []}
        for event in store.log(user_id).events:
            if not event.item_id or event.item_id not in items:
                continue
            product = catalog.get(event.item_id)
            if event.behavior in _CLICK_KINDS:
                slots["click"].append(event.item_id)
            elif event.behavior is BehaviorKind.PURCHASE:
                slots["purchase"].append(event.item_id)
            else:
                continue
            interactions.append(Interaction(
                user_id=user_id, item_id=event.item_id,
                tag=product.title.lower()))
        sequences[user_id] = slots
    return RetrievalDataset(items=items, interactions=interactions,
                            user_sequences=sequences)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, provider: Provider | None = None):
        self.cfg = cfg
        self.store = EventStore(cfg.store_dir)
        self.artifacts = Path(cfg.artifacts_dir)
        self.artifacts.mkdir(parents=True, exist_ok=True)
        if provider is None:
            provider = (StubProvider(seed=cfg.seed) if cfg.provider == "stub"
                        else HttpProvider())
        self.gateway = Gateway(provider, context_limit=cfg.token_budget,
                               backoff_base=0.05)
        self.judge = RuleJudge()
        self.catalog = Catalog.load(cfg.catalog_path) \
            if Path(cfg.catalog_path).exists() else None
        self.users = self._load_users()
        self.profiles = ProfileStore(self.artifacts / "profiles.jsonl")
        self.tag_sets = TagSetStore(self.artifacts / "tagsets.jsonl")
        self.model_path = self.artifacts / "model.bin"
        self.taxonomy_path = self.artifacts / "taxonomy.json"
        self.table_path = self.artifacts / "explanations.jsonl"
        self._model: TriTowerModel | None = None
        self._embedded: EmbeddedCatalog | None = None
        self._taxonomy: CategoryTaxonomy | None = None

    def _load_users(self) -> dict[str, UserAttributes]:
        path = Path(self.cfg.users_path)
        if not path.exists():
            return {}
        users = {}
        for record in json.loads(path.read_text(encoding="utf-8")):
            users[record["user_id"]] = UserAttributes(
                user_id=record["user_id"], age=record.get("age"),
                gender=record.get("gender"), location=record.get("location"))
        return users

    def now(self) -> int:
        return self.cfg.now if self.cfg.now else int(time.time())

    def attributes(self, user_id: str) -> UserAttributes:
        return self.users.get(user_id, UserAttributes(user_id=user_id))

    # -- stage: retrieval model -------------------------------------------

    def ensure_model(self) -> TriTowerModel:
        if self._model is not None:
            return self._model
        if self.model_path.exists():
            self._model = load_model(self.model_path)
            return self._model
        if self.catalog is None:
            raise StageError("train", f"catalog missing at {self.cfg.catalog_path}")
        dataset = dataset_from_store(self.store, self.catalog)
        if not dataset.interactions:
            raise StageError("train", "no interactions in the event store")
        loss_cfg = LossConfig(
            alpha=self.cfg.alpha, k_negatives=self.cfg.k_negatives,
            learning_rate=self.cfg.learning_rate, steps=self.cfg.train_steps,
            batch_size=self.cfg.batch_size, seed=self.cfg.seed)
        model_cfg = ModelConfig(embed_dim=self.cfg.embed_dim,
                                output_dim=self.cfg.output_dim,
                                seed=self.cfg.seed)
        result = train(dataset, loss_cfg, model_config=model_cfg)
        save_model(result.model, self.model_path)
        history_path = self.artifacts / "loss_history.json"
        history_path.write_text(json.dumps(result.history), encoding="utf-8")
        self._model = result.model
        return result.model

    def embedded_catalog(self) -> EmbeddedCatalog:
        if self._embedded is None:
            if self.catalog is None:
                raise StageError("retrieve", "catalog missing")
            self._embedded = EmbeddedCatalog.build(
                self.ensure_model(), self.catalog.features_list())
        return self._embedded

    def ensure_taxonomy(self) -> CategoryTaxonomy:
        if self._taxonomy is not None:
            return self._taxonomy
        if self.taxonomy_path.exists():
            self._taxonomy = CategoryTaxonomy.load(self.taxonomy_path)
            return self._taxonomy
        if self.catalog is None:
            raise StageError("taxonomy", "catalog missing")
        self._taxonomy = build_taxonomy(self.catalog, self.ensure_model())
        self._taxonomy.save(self.taxonomy_path)
        return self._taxonomy

    # -- stage: interests ---------------------------------------------------

    def ensure_profile(self, user_id: str) -> InterestProfile:
        existing = self.profiles.load(user_id)
        if existing is not None:
            return existing
        try:
            log = reliable_filter(self.store.log(user_id))
            compressed = compress(log, self.now(), budget=self.cfg.token_budget)
            pool = match_pool(compressed, lexicons.DEFAULT_CATEGORY_INTERESTS,
                              self.cfg.pool_size) if compressed.groups else \
                InterestPool(interests=())
            profile = mine_interests(
                self.gateway, self.attributes(user_id), compressed, pool,
                now=self.now(), seed=self.cfg.seed,
                floor=self.cfg.interest_floor)
            profile = screen_interests(profile, self.judge, compressed.rendered)
        except TagrecError as err:
            raise StageError("mine-interests", str(err)) from err
        self.profiles.save(profile)
        return profile

    # -- stage: tags ---------------------------------------------------------

    def ensure_tags(self, user_id: str, profile: InterestProfile) -> TagPredictionSet:
        existing = self.tag_sets.load(user_id)
        if existing is not None:
            return existing
        try:
            log = self.store.log(user_id)
            tag_set = predict_tags(
                self.gateway, self.attributes(user_id), profile,
                behavior_views(log), extra="none",
                now=self.now(), seed=self.cfg.seed)
            checker = ValidityChecker(self.ensure_model(), self.embedded_catalog(),
                                      self.cfg.validity_threshold)
            report = validate_set(tag_set, profile, log, self.now(),
                                  catalog=checker, min_tags=self.cfg.min_tags)
            report_path = self.artifacts / "tag_reports.jsonl"
            with report_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"user_id": user_id,
                                     "report": report.to_wire()},
                                    ensure_ascii=False) + "\n")
        except TagrecError as err:
            raise StageError("predict-tags", str(err)) from err
        self.tag_sets.save(tag_set)
        return tag_set

    # -- stage: explanations --------------------------------------------------

    def ensure_explanations(self, profile: InterestProfile) -> ExplanationTable:
        table = ExplanationTable.load(self.table_path)
        try:
            phi = TagMapper(self.ensure_taxonomy(), self.ensure_model())
            tag_sets = list(self.tag_sets.load_all().values())
            links = derive_interest_links(tag_sets, phi)
            pairs, _ = pair_candidates([profile], self.catalog, links)
            generator = lambda interest, item_id: generate_explanation(
                self.gateway, interest, self.catalog.get(item_id),
                date_ts=self.now(), judge=self.judge, seed=self.cfg.seed)
            build_table(table, pairs, generator)
        except TagrecError as err:
            raise StageError("build-explanations", str(err)) from err
        table.save(self.table_path)
        return table

    # -- full loop -------------------------------------------------------------

    def user_vector(self, user_id: str) -> np.ndarray:
        model = self.ensure_model()
        slots: dict[str, list] = {"click": [], "purchase": []}
        for event in self.store.log(user_id).events:
            if not event.item_id or event.item_id not in self.catalog:
                continue
            features = self.catalog.get(event.item_id).features()
            if event.behavior in _CLICK_KINDS:
                slots["click"].append(features)
            elif event.behavior is BehaviorKind.PURCHASE:
                slots["purchase"].append(features)
        return embed_user(model, user_id, slots)

    def tag_vector(self, tag_set: TagPredictionSet) -> np.ndarray:
        """Intent centroid: mean tag-tower vector over the predicted set."""
        model = self.ensure_model()
        if not tag_set.triplets:
            return np.zeros(model.output_dim)
        vectors = [embed_tag(model, t.tag) for t in tag_set.triplets]
        return np.mean(vectors, axis=0)

    def run(self, user_id: str, k: int | None = None) -> RecommendationBundle:
        if self.catalog is None:
            raise StageError("setup", f"catalog missing at {self.cfg.catalog_path}")
        if user_id not in set(self.store.user_ids()):
            raise StageError("setup", f"unknown user {user_id!r}")
        k = k if k is not None else self.cfg.top_k
        profile = self.ensure_profile(user_id)
        tag_set = self.ensure_tags(user_id, profile)
        model = self.ensure_model()
        try:
            h_u = self.user_vector(user_id)
            h_t = self.tag_vector(tag_set)
            fused = fuse(h_u, h_t, FusionConfig(beta=self.cfg.beta))
            ranked = retrieve_topk(self.embedded_catalog(), fused, k)
        except TagrecError as err:
            raise StageError("retrieve", str(err)) from err
        table = self.ensure_explanations(profile)
        items = []
        for item_id, item_score in ranked:
            product = self.catalog.get(item_id)
            entry = lookup(table, item_id, profile, product, now=self.now())
            items.append(BundleItem(item_id=item_id, score=item_score,
                                    explanation=entry.explanation,
                                    fallback=entry.fallback))
        trace = {
            "profile": {"path": str(self.profiles.path),
                        "generated_at": profile.generated_at,
                        "interests": len(profile.interests)},
            "tag_set": {"path": str(self.tag_sets.path),
                        "generated_at": tag_set.generated_at,
                        "tags": len(tag_set.triplets)},
            "model": {"path": str(self.model_path),
                      "sha256": _file_hash(self.model_path)},
            "beta": self.cfg.beta,
            "k": k,
        }
        return RecommendationBundle(user_id=user_id, items=tuple(items), trace=trace)


def _file_hash(path: Path) -> str:
    if not path.exists():
        return ""
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]
