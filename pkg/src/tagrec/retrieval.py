"""User-item-tag retrieval: three embedding towers, contrastive
training, and fused dot-product retrieval.

All numerics are plain numpy with an analytic backward pass, so every
gradient is auditable and checkable against finite differences.  Scores
are raw dot products; an optional L2-normalization flag exists on the
model config but defaults off.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, TrainingDivergedError, ValidationError
from .textproc import tokenize

MAGIC = b"TTRV"
CHECKPOINT_VERSION = 1
OOV_TOKEN = "<oov>"


# ---------------------------------------------------------------------------
# Features and dataset


@dataclass(frozen=True)
class ItemFeatures:
    sparse: dict[str, str]
    dense: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if "item_id" not in self.sparse:
            raise ValidationError("item features must include item_id")
        for name, value in self.dense.items():
            if not math.isfinite(value):
                raise ValidationError(f"dense feature {name!r} is not finite")

    @property
    def item_id(self) -> str:
        return self.sparse["item_id"]

    @property
    def category(self) -> str:
        return self.sparse.get("category", "")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    tag: str


@dataclass
class RetrievalDataset:
    items: dict[str, ItemFeatures]
    interactions: list[Interaction]
    user_sequences: dict[str, dict[str, list[str]]]

    def features(self, item_id: str) -> ItemFeatures:
        return self.items[item_id]

    def category(self, item_id: str) -> str:
        return self.items[item_id].category

    def sequences_for(self, user_id: str) -> dict[str, list[ItemFeatures]]:
        raw = self.user_sequences.get(user_id, {})
        return {behavior: [self.items[i] for i in ids if i in self.items]
                for behavior, ids in raw.items()}


# ---------------------------------------------------------------------------
# Discretization


@dataclass(frozen=True)
class BucketSpec:
    boundaries: tuple[float, ...]

    def __post_init__(self) -> None:
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValidationError("bucket boundaries must be ascending")

    @property
    def bucket_count(self) -> int:
        return len(self.boundaries) + 1


def discretize(value: float, spec: BucketSpec) -> int:
    """Index of the half-open quantile bucket containing value."""
    if math.isnan(value):
        raise ValidationError("cannot discretize NaN")
    return int(np.searchsorted(np.asarray(spec.boundaries), value, side="right"))


def fit_bucket_spec(values: list[float], buckets: int = 16) -> BucketSpec:
    """Quantile boundaries fit on training data; duplicates collapse."""
    if not values:
        return BucketSpec(boundaries=())
    quantiles = np.quantile(np.asarray(values, dtype=np.float64),
                            [i / buckets for i in range(1, buckets)])
    boundaries = tuple(sorted(set(float(q) for q in quantiles)))
    return BucketSpec(boundaries=boundaries)


# ---------------------------------------------------------------------------
# Model pieces


class EmbeddingTable:
    """Vocab-indexed rows with a reserved out-of-vocabulary row."""

    def __init__(self, name: str, vocab: list[str], dim: int, rng: np.random.Generator):
        self.name = name
        self.index = {key: i for i, key in enumerate(vocab)}
        self.oov_index = len(vocab)
        self.rows = rng.normal(0.0, 0.1, size=(len(vocab) + 1, dim))

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, key: str) -> int:
        return self.index.get(key, self.oov_index)

    def vocab(self) -> list[str]:
        return [key for key, _ in sorted(self.index.items(), key=lambda kv: kv[1])]


class TowerNetwork:
    """Small MLP: list of (weight, bias, activation) layers."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 activations: list[str]):
        self.weights = weights
        self.biases = biases
        self.activations = activations
        for w, b in zip(weights, biases):
            if w.shape[0] != b.shape[0]:
                raise ConfigurationError("bias/weight shape mismatch")
        for prev, nxt in zip(weights, weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ConfigurationError("layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, output_dim: int,
               rng: np.random.Generator) -> "TowerNetwork":
        w1 = rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(hidden_dim, input_dim))
        w2 = rng.normal(0.0, math.sqrt(1.0 / hidden_dim), size=(output_dim, hidden_dim))
        return cls(weights=[w1, w2],
                   biases=[np.zeros(hidden_dim), np.zeros(output_dim)],
                   activations=["relu", "identity"])

    @classmethod
    def identity(cls, dim: int) -> "TowerNetwork":
        """Single pass-through layer, used by unit tests."""
        return cls(weights=[np.eye(dim)], biases=[np.zeros(dim)],
                   activations=["identity"])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        if x.shape[0] != self.input_dim:
            raise ConfigurationError(
                f"tower expects input dim {self.input_dim}, got {x.shape[0]}")
        cache = []
        out = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            pre = w @ out + b
            cache.append((out, pre))
            out = np.maximum(pre, 0.0) if act == "relu" else pre
        return out, cache

    def backward(self, cache: list, dy: np.ndarray) -> tuple[np.ndarray, list]:
        grads = [None] * len(self.weights)
        grad = dy
        for i in range(len(self.weights) - 1, -1, -1):
            x_in, pre = cache[i]
            if self.activations[i] == "relu":
                grad = grad * (pre > 0.0)
            grads[i] = (np.outer(grad, x_in), grad.copy())
            grad = self.weights[i].T @ grad
        return grad, grads


@dataclass
class ModelConfig:
    embed_dim: int = 16
    output_dim: int = 32
    hidden_dim: int | None = None
    sparse_features: tuple[str, ...] = ("item_id", "category", "brand")
    dense_features: tuple[str, ...] = ("price",)
    behaviors: tuple[str, ...] = ("click", "purchase")
    dense_buckets: int = 16
    normalize: bool = False
    seed: int = 0

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else 2 * self.output_dim

    def to_wire(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "sparse_features": list(self.sparse_features),
            "dense_features": list(self.dense_features),
            "behaviors": list(self.behaviors),
            "dense_buckets": self.dense_buckets,
            "normalize": self.normalize, "seed": self.seed,
        }

    @classmethod
    def from_wire(cls, record: dict) -> "ModelConfig":
        return cls(
            embed_dim=record["embed_dim"], output_dim=record["output_dim"],
            hidden_dim=record["hidden_dim"],
            sparse_features=tuple(record["sparse_features"]),
            dense_features=tuple(record["dense_features"]),
            behaviors=tuple(record["behaviors"]),
            dense_buckets=record["dense_buckets"],
            normalize=record["normalize"], seed=record["seed"],
        )


class TriTowerModel:
    """Item, user, and tag towers sharing output dimension d."""

    def __init__(self, config: ModelConfig,
                 item_tables: dict[str, EmbeddingTable],
                 dense_specs: dict[str, BucketSpec],
                 user_table: EmbeddingTable,
                 tag_table: EmbeddingTable,
                 item_tower: TowerNetwork,
                 user_tower: TowerNetwork,
                 tag_tower: TowerNetwork):
        self.config = config
        self.item_tables = item_tables
        self.dense_specs = dense_specs
        self.user_table = user_table
        self.tag_table = tag_table
        self.item_tower = item_tower
        self.user_tower = user_tower
        self.tag_tower = tag_tower
        dims = {item_tower.output_dim, user_tower.output_dim, tag_tower.output_dim}
        if len(dims) != 1:
            raise ConfigurationError(f"towers disagree on output dim: {sorted(dims)}")

    @property
    def output_dim(self) -> int:
        return self.item_tower.output_dim

    @property
    def item_concat_dim(self) -> int:
        return (len(self.config.sparse_features) + len(self.config.dense_features)) \
            * self.config.embed_dim

    def feature_names(self) -> tuple[str, ...]:
        return tuple(self.config.sparse_features) + tuple(self.config.dense_features)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every parameter tensor, keyed by name."""
        params: dict[str, np.ndarray] = {}
        for name, table in self.item_tables.items():
            params[f"item_emb.{name}"] = table.rows
        params["user_emb"] = self.user_table.rows
        params["tag_emb"] = self.tag_table.rows
        for tower_name, tower in (("item_tower", self.item_tower),
                                  ("user_tower", self.user_tower),
                                  ("tag_tower", self.tag_tower)):
            for i, (w, b) in enumerate(zip(tower.weights, tower.biases)):
                params[f"{tower_name}.{i}.weight"] = w
                params[f"{tower_name}.{i}.bias"] = b
        return params


def build_model(catalog: list[ItemFeatures], user_ids: list[str],
                tag_corpus: list[str], config: ModelConfig) -> TriTowerModel:
    rng = np.random.default_rng(config.seed)
    item_tables: dict[str, EmbeddingTable] = {}
    for feature in config.sparse_features:
        vocab = sorted({item.sparse.get(feature, "") for item in catalog} - {""})
        item_tables[feature] = EmbeddingTable(feature, vocab, config.embed_dim, rng)
    dense_specs: dict[str, BucketSpec] = {}
    for feature in config.dense_features:
        values = [item.dense[feature] for item in catalog if feature in item.dense]
        spec = fit_bucket_spec(values, config.dense_buckets)
        dense_specs[feature] = spec
        bucket_vocab = [str(i) for i in range(spec.bucket_count)]
        item_tables[feature] = EmbeddingTable(feature, bucket_vocab, config.embed_dim, rng)
    user_table = EmbeddingTable("user_id", sorted(set(user_ids)), config.embed_dim, rng)
    tokens = sorted({token for tag in tag_corpus for token in tokenize(tag)})
    tag_table = EmbeddingTable("tag_tokens", tokens, config.embed_dim, rng)

    concat_dim = (len(config.sparse_features) + len(config.dense_features)) * config.embed_dim
    user_input = config.embed_dim + len(config.behaviors) * concat_dim
    return TriTowerModel(
        config=config,
        item_tables=item_tables,
        dense_specs=dense_specs,
        user_table=user_table,
        tag_table=tag_table,
        item_tower=TowerNetwork.create(concat_dim, config.hidden, config.output_dim, rng),
        user_tower=TowerNetwork.create(user_input, config.hidden, config.output_dim, rng),
        tag_tower=TowerNetwork.create(config.embed_dim, config.hidden, config.output_dim, rng),
    )


# ---------------------------------------------------------------------------
# Forward passes (with caches for the backward phase)


def _item_rows(model: TriTowerModel, features: ItemFeatures) -> list[tuple[str, int]]:
    """(table name, row index) per declared feature, missing -> OOV."""
    rows = []
    for feature in model.config.sparse_features:
        table = model.item_tables[feature]
        value = features.sparse.get(feature)
        rows.append((feature, table.lookup(value) if value is not None else table.oov_index))
    for feature in model.config.dense_features:
        table = model.item_tables[feature]
        if feature in features.dense:
            bucket = discretize(features.dense[feature], model.dense_specs[feature])
            rows.append((feature, bucket))
        else:
            rows.append((feature, table.oov_index))
    return rows


def _item_concat(model: TriTowerModel, features: ItemFeatures
                 ) -> tuple[np.ndarray, list[tuple[str, int]]]:
    rows = _item_rows(model, features)
    parts = [model.item_tables[name].rows[idx] for name, idx in rows]
    return np.concatenate(parts), rows


def _normalize(h: np.ndarray) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(h))
    if norm == 0.0:
        return h, 0.0
    return h / norm, norm


@dataclass
class _Forward:
    h: np.ndarray
    tower_cache: list
    rows: list            # scatter targets, meaning depends on tower
    norm: float = 0.0
    raw: np.ndarray | None = None


def _forward_item(model: TriTowerModel, features: ItemFeatures) -> _Forward:
    x, rows = _item_concat(model, features)
    h, cache = model.item_tower.forward(x)
    fwd = _Forward(h=h, tower_cache=cache, rows=rows)
    if model.config.normalize:
        fwd.raw = h
        fwd.h, fwd.norm = _normalize(h)
    return fwd


def _forward_user(model: TriTowerModel, user_id: str,
                  sequences: dict[str, list[ItemFeatures]]) -> _Forward:
    user_row = model.user_table.lookup(user_id)
    parts = [model.user_table.rows[user_row]]
    slot_rows = []
    for behavior in model.config.behaviors:
        items = sequences.get(behavior, [])
        if items:
            concats = []
            item_rows = []
            for features in items:
                x, rows = _item_concat(model, features)
                concats.append(x)
                item_rows.append(rows)
            parts.append(np.mean(concats, axis=0))
            slot_rows.append(item_rows)
        else:
            parts.append(np.zeros(model.item_concat_dim))
            slot_rows.append([])
    x = np.concatenate(parts)
    h, cache = model.user_tower.forward(x)
    fwd = _Forward(h=h, tower_cache=cache, rows=[user_row, slot_rows])
    if model.config.normalize:
        fwd.raw = h
        fwd.h, fwd.norm = _normalize(h)
    return fwd


def _forward_tag(model: TriTowerModel, tag: str) -> _Forward:
    tokens = tokenize(tag) or [OOV_TOKEN]
    indices = [model.tag_table.lookup(token) for token in tokens]
    x = np.mean([model.tag_table.rows[i] for i in indices], axis=0)
    h, cache = model.tag_tower.forward(x)
    fwd = _Forward(h=h, tower_cache=cache, rows=indices)
    if model.config.normalize:
        fwd.raw = h
        fwd.h, fwd.norm = _normalize(h)
    return fwd


def embed_item(model: TriTowerModel, features: ItemFeatures) -> np.ndarray:
    """Concatenate per-feature embeddings in declared order, apply the
    item tower."""
    return _forward_item(model, features).h


def embed_user(model: TriTowerModel, user_id: str,
               sequences: dict[str, list[ItemFeatures]]) -> np.ndarray:
    """User-id embedding plus mean-pooled pre-tower item vectors per
    behavior slot, through the user tower.  Empty slots pool to zero."""
    return _forward_user(model, user_id, sequences).h


def embed_tag(model: TriTowerModel, tag: str) -> np.ndarray:
    """Mean-pooled token embeddings through the tag tower."""
    return _forward_tag(model, tag).h


def score(h_a: np.ndarray, h_b: np.ndarray) -> float:
    """Raw dot product; collaborative and semantic scores alike."""
    if h_a.shape != h_b.shape:
        raise ConfigurationError(f"score dims differ: {h_a.shape} vs {h_b.shape}")
    return float(np.dot(h_a, h_b))


# ---------------------------------------------------------------------------
# Losses and training


@dataclass
class LossConfig:
    alpha: float = 0.5
    k_negatives: int = 8
    cate_positives: int = 2
    cate_negatives: int = 4
    learning_rate: float = 0.2
    steps: int = 200
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must be in [0, 1]")


@dataclass
class TrainingBatch:
    dataset: RetrievalDataset
    positives: list[Interaction]
    negatives: list[list[str]]
    cate_positives: list[list[str]]
    cate_negatives: list[list[str]]

    def __post_init__(self) -> None:
        for interaction, negs in zip(self.positives, self.negatives):
            if interaction.item_id in negs:
                raise ValidationError("negatives must exclude the positive item")
        for interaction, pos in zip(self.positives, self.cate_positives):
            category = self.dataset.category(interaction.item_id)
            for item_id in pos:
                if self.dataset.category(item_id) != category:
                    raise ValidationError("cate positives must share the category")
        for interaction, negs in zip(self.positives, self.cate_negatives):
            category = self.dataset.category(interaction.item_id)
            for item_id in negs:
                if self.dataset.category(item_id) == category:
                    raise ValidationError("cate negatives must differ in category")


def sample_batch(dataset: RetrievalDataset, cfg: LossConfig,
                 rng: np.random.Generator,
                 positives: list[Interaction] | None = None) -> TrainingBatch:
    """Uniform negative sampling from the catalog minus the positive."""
    all_ids = sorted(dataset.items)
    by_category: dict[str, list[str]] = {}
    for item_id in all_ids:
        by_category.setdefault(dataset.category(item_id), []).append(item_id)
    if positives is None:
        picks = rng.choice(len(dataset.interactions),
                           size=min(cfg.batch_size, len(dataset.interactions)),
                           replace=False)
        positives = [dataset.interactions[i] for i in sorted(picks)]
    def pick(pool: list[str], count: int) -> list[str]:
        if not pool or count <= 0:
            return []
        chosen = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
        return [pool[i] for i in chosen]

    negatives, cate_pos, cate_neg = [], [], []
    for interaction in positives:
        pool = [i for i in all_ids if i != interaction.item_id]
        negatives.append(pick(pool, cfg.k_negatives))
        category = dataset.category(interaction.item_id)
        same = [i for i in by_category.get(category, []) if i != interaction.item_id]
        other = [i for i in all_ids if dataset.category(i) != category]
        cate_pos.append(pick(same, cfg.cate_positives))
        cate_neg.append(pick(other, cfg.cate_negatives))
    return TrainingBatch(dataset=dataset, positives=positives, negatives=negatives,
                         cate_positives=cate_pos, cate_negatives=cate_neg)


def _softmax_nll(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of index 0 under a stable softmax, with d/dlogits."""
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    total = float(np.sum(exp))
    loss = -float(shifted[0] - math.log(total))
    grad = exp / total
    grad[0] -= 1.0
    return loss, grad


class _BatchGraph:
    """Shared forward state over the batch's unique users/items/tags."""

    def __init__(self, batch: TrainingBatch, model: TriTowerModel):
        self.model = model
        dataset = batch.dataset
        self.items: dict[str, _Forward] = {}
        self.users: dict[str, _Forward] = {}
        self.tags: dict[str, _Forward] = {}
        item_ids = set()
        for i, interaction in enumerate(batch.positives):
            item_ids.add(interaction.item_id)
            item_ids.update(batch.negatives[i])
            item_ids.update(batch.cate_positives[i])
            item_ids.update(batch.cate_negatives[i])
        for item_id in sorted(item_ids):
            self.items[item_id] = _forward_item(model, dataset.features(item_id))
        for interaction in batch.positives:
            if interaction.user_id not in self.users:
                self.users[interaction.user_id] = _forward_user(
                    model, interaction.user_id, dataset.sequences_for(interaction.user_id))
            if interaction.tag not in self.tags:
                self.tags[interaction.tag] = _forward_tag(model, interaction.tag)
        self.d_items = {key: np.zeros_like(fwd.h) for key, fwd in self.items.items()}
        self.d_users = {key: np.zeros_like(fwd.h) for key, fwd in self.users.items()}
        self.d_tags = {key: np.zeros_like(fwd.h) for key, fwd in self.tags.items()}


def _batch_losses(batch: TrainingBatch, model: TriTowerModel, alpha: float,
                  graph: _BatchGraph | None = None,
                  accumulate: bool = False) -> tuple[float, float, float]:
    """Covers all three contrastive sums; optionally accumulates
    d(total)/dh into the graph with the alpha weighting applied."""
    graph = graph or _BatchGraph(batch, model)
    loss_col = loss_tag = loss_cate = 0.0
    for i, interaction in enumerate(batch.positives):
        h_u = graph.users[interaction.user_id].h
        h_t = graph.tags[interaction.tag].h
        h_v = graph.items[interaction.item_id].h
        neg_ids = batch.negatives[i]
        neg_vecs = [graph.items[n].h for n in neg_ids]

        logits = np.array([score(h_u, h_v)] + [score(h_u, hv) for hv in neg_vecs])
        part, dlogits = _softmax_nll(logits)
        loss_col += part
        if accumulate:
            for j, hv in enumerate([h_v] + neg_vecs):
                graph.d_users[interaction.user_id] += dlogits[j] * hv
            graph.d_items[interaction.item_id] += dlogits[0] * h_u
            for j, neg in enumerate(neg_ids):
                graph.d_items[neg] += dlogits[j + 1] * h_u

        logits = np.array([score(h_t, h_v)] + [score(h_t, hv) for hv in neg_vecs])
        part, dlogits = _softmax_nll(logits)
        loss_tag += part
        if accumulate:
            for j, hv in enumerate([h_v] + neg_vecs):
                graph.d_tags[interaction.tag] += alpha * dlogits[j] * hv
            graph.d_items[interaction.item_id] += alpha * dlogits[0] * h_t
            for j, neg in enumerate(neg_ids):
                graph.d_items[neg] += alpha * dlogits[j + 1] * h_t

        cate_neg_ids = batch.cate_negatives[i]
        if not cate_neg_ids:
            continue
        cate_neg_vecs = [graph.items[n].h for n in cate_neg_ids]
        for pos_id in batch.cate_positives[i]:
            h_pos = graph.items[pos_id].h
            logits = np.array([score(h_t, h_pos)]
                              + [score(h_t, hv) for hv in cate_neg_vecs])
            part, dlogits = _softmax_nll(logits)
            loss_cate += part
            if accumulate:
                weight = 1.0 - alpha
                for j, hv in enumerate([h_pos] + cate_neg_vecs):
                    graph.d_tags[interaction.tag] += weight * dlogits[j] * hv
                graph.d_items[pos_id] += weight * dlogits[0] * h_t
                for j, neg in enumerate(cate_neg_ids):
                    graph.d_items[neg] += weight * dlogits[j + 1] * h_t
    return loss_col, loss_tag, loss_cate


def loss_col(batch: TrainingBatch, model: TriTowerModel) -> float:
    return _batch_losses(batch, model, alpha=0.5)[0]


def loss_tag(batch: TrainingBatch, model: TriTowerModel) -> float:
    return _batch_losses(batch, model, alpha=0.5)[1]


def loss_cate(batch: TrainingBatch, model: TriTowerModel) -> float:
    return _batch_losses(batch, model, alpha=0.5)[2]


def loss_total(batch: TrainingBatch, model: TriTowerModel, cfg: LossConfig) -> float:
    l_col, l_tag, l_cate = _batch_losses(batch, model, cfg.alpha)
    return l_col + cfg.alpha * l_tag + (1.0 - cfg.alpha) * l_cate


def _norm_backward(fwd: _Forward, dh: np.ndarray) -> np.ndarray:
    """Backward through y = x / ||x||."""
    if fwd.norm == 0.0:
        return dh
    y = fwd.h
    return (dh - y * float(np.dot(y, dh))) / fwd.norm


def _scatter_item(model: TriTowerModel, fwd: _Forward, dh: np.ndarray,
                  grads: dict[str, np.ndarray]) -> None:
    if model.config.normalize:
        dh = _norm_backward(fwd, dh)
    dx, layer_grads = model.item_tower.backward(fwd.tower_cache, dh)
    for i, (dw, db) in enumerate(layer_grads):
        grads[f"item_tower.{i}.weight"] += dw
        grads[f"item_tower.{i}.bias"] += db
    _scatter_concat(model, fwd.rows, dx, grads, 1.0)


def _scatter_concat(model: TriTowerModel, rows: list[tuple[str, int]],
                    dx: np.ndarray, grads: dict[str, np.ndarray],
                    scale: float) -> None:
    e = model.config.embed_dim
    for pos, (feature, row) in enumerate(rows):
        grads[f"item_emb.{feature}"][row] += scale * dx[pos * e:(pos + 1) * e]


def _scatter_user(model: TriTowerModel, fwd: _Forward, dh: np.ndarray,
                  grads: dict[str, np.ndarray]) -> None:
    if model.config.normalize:
        dh = _norm_backward(fwd, dh)
    dx, layer_grads = model.user_tower.backward(fwd.tower_cache, dh)
    for i, (dw, db) in enumerate(layer_grads):
        grads[f"user_tower.{i}.weight"] += dw
        grads[f"user_tower.{i}.bias"] += db
    e = model.config.embed_dim
    user_row, slot_rows = fwd.rows
    grads["user_emb"][user_row] += dx[:e]
    concat_dim = model.item_concat_dim
    offset = e
    for item_rows in slot_rows:
        segment = dx[offset:offset + concat_dim]
        offset += concat_dim
        if not item_rows:
            continue
        share = 1.0 / len(item_rows)
        for rows in item_rows:
            _scatter_concat(model, rows, segment, grads, share)


def _scatter_tag(model: TriTowerModel, fwd: _Forward, dh: np.ndarray,
                 grads: dict[str, np.ndarray]) -> None:
    if model.config.normalize:
        dh = _norm_backward(fwd, dh)
    dx, layer_grads = model.tag_tower.backward(fwd.tower_cache, dh)
    for i, (dw, db) in enumerate(layer_grads):
        grads[f"tag_tower.{i}.weight"] += dw
        grads[f"tag_tower.{i}.bias"] += db
    share = 1.0 / len(fwd.rows)
    for row in fwd.rows:
        grads["tag_emb"][row] += share * dx


def loss_and_grads(batch: TrainingBatch, model: TriTowerModel, cfg: LossConfig
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Total loss plus d(total)/d(parameter) for every tensor."""
    graph = _BatchGraph(batch, model)
    l_col, l_tag, l_cate = _batch_losses(batch, model, cfg.alpha, graph=graph,
                                         accumulate=True)
    total = l_col + cfg.alpha * l_tag + (1.0 - cfg.alpha) * l_cate
    grads = {name: np.zeros_like(tensor) for name, tensor in model.parameters().items()}
    for item_id, dh in graph.d_items.items():
        if np.any(dh):
            _scatter_item(model, graph.items[item_id], dh, grads)
    for user_id, dh in graph.d_users.items():
        if np.any(dh):
            _scatter_user(model, graph.users[user_id], dh, grads)
    for tag, dh in graph.d_tags.items():
        if np.any(dh):
            _scatter_tag(model, graph.tags[tag], dh, grads)
    return total, grads


@dataclass
class TrainingResult:
    model: TriTowerModel
    history: list[float]


def train(dataset: RetrievalDataset, cfg: LossConfig,
          model_config: ModelConfig | None = None,
          model: TriTowerModel | None = None) -> TrainingResult:
    """Seeded mini-batch SGD on the combined contrastive objective."""
    if not dataset.interactions:
        raise ValidationError("dataset has no interactions")
    if model is None:
        model_config = model_config or ModelConfig(seed=cfg.seed)
        model = build_model(
            catalog=list(dataset.items.values()),
            user_ids=sorted({x.user_id for x in dataset.interactions}),
            tag_corpus=[x.tag for x in dataset.interactions],
            config=model_config,
        )
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    history: list[float] = []
    for step in range(cfg.steps):
        batch = sample_batch(dataset, cfg, rng)
        total, grads = loss_and_grads(batch, model, cfg)
        if not math.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}", step=step, history=history)
        # The objective is a sum over positives; updates use the
        # per-positive mean gradient so the step size is batch-invariant.
        scale = cfg.learning_rate / max(1, len(batch.positives))
        for name, grad in grads.items():
            params[name] -= scale * grad
        history.append(total)
    return TrainingResult(model=model, history=history)


# ---------------------------------------------------------------------------
# Inference


def fuse(h_u: np.ndarray, h_t: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """beta * h_u + (1 - beta) * h_t; scoring the result against an item
    equals the same blend of collaborative and semantic scores."""
    if h_u.shape != h_t.shape:
        raise ConfigurationError("fusion inputs must share dimensions")
    return cfg.beta * h_u + (1.0 - cfg.beta) * h_t


class EmbeddedCatalog:
    """Materialized item vectors for exact dot-product retrieval."""

    def __init__(self, item_ids: list[str], matrix: np.ndarray):
        if matrix.shape[0] != len(item_ids):
            raise ConfigurationError("catalog matrix row count mismatch")
        self.item_ids = list(item_ids)
        self.matrix = matrix

    @classmethod
    def build(cls, model: TriTowerModel, items: list[ItemFeatures]) -> "EmbeddedCatalog":
        ordered = sorted(items, key=lambda f: f.item_id)
        vectors = [embed_item(model, features) for features in ordered]
        matrix = np.stack(vectors) if vectors else np.zeros((0, model.output_dim))
        return cls([f.item_id for f in ordered], matrix)

    def __len__(self) -> int:
        return len(self.item_ids)


def retrieve_topk(catalog: EmbeddedCatalog, query: np.ndarray,
                  k: int) -> list[tuple[str, float]]:
    """Exact top-k by descending dot product, ties by ascending item id.

    Scores use per-row dots so the accumulation order is fixed and the
    ranking is bit-reproducible regardless of BLAS batching.
    """
    if k <= 0 or len(catalog) == 0:
        return []
    scores = [float(catalog.matrix[i] @ query) for i in range(len(catalog))]
    order = sorted(range(len(catalog)),
                   key=lambda i: (-scores[i], catalog.item_ids[i]))
    return [(catalog.item_ids[i], scores[i]) for i in order[:k]]


def validity_probe(model: TriTowerModel, tag: str, catalog: EmbeddedCatalog,
                   threshold: float) -> bool:
    """A tag is retrievable when some catalog item scores >= threshold."""
    if len(catalog) == 0:
        return False
    h_t = embed_tag(model, tag)
    return bool(np.max(catalog.matrix @ h_t) >= threshold)


class ValidityChecker:
    """Binds a trained model + catalog for tag-validity callbacks."""

    def __init__(self, model: TriTowerModel, catalog: EmbeddedCatalog,
                 threshold: float):
        self.model = model
        self.catalog = catalog
        self.threshold = threshold

    def is_valid_tag(self, tag: str) -> bool:
        return validity_probe(self.model, tag, self.catalog, self.threshold)


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_model(model: TriTowerModel, path: Path | str) -> None:
    """Versioned binary: magic, version, JSON header, float32 tensors."""
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = sorted(model.parameters().items())
    header = {
        "config": model.config.to_wire(),
        "vocabs": {name: table.vocab() for name, table in model.item_tables.items()},
        "user_vocab": model.user_table.vocab(),
        "tag_vocab": model.tag_table.vocab(),
        "dense_specs": {name: list(spec.boundaries)
                        for name, spec in model.dense_specs.items()},
        "towers": {
            name: {"activations": tower.activations,
                   "shapes": [list(w.shape) for w in tower.weights]}
            for name, tower in (("item_tower", model.item_tower),
                                ("user_tower", model.user_tower),
                                ("tag_tower", model.tag_tower))
        },
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: Path | str) -> TriTowerModel:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValidationError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig.from_wire(header["config"])
        rng = np.random.default_rng(0)
        item_tables = {}
        for name, vocab in header["vocabs"].items():
            item_tables[name] = EmbeddingTable(name, vocab, config.embed_dim, rng)
        user_table = EmbeddingTable("user_id", header["user_vocab"],
                                    config.embed_dim, rng)
        tag_table = EmbeddingTable("tag_tokens", header["tag_vocab"],
                                   config.embed_dim, rng)
        dense_specs = {name: BucketSpec(tuple(bounds))
                       for name, bounds in header["dense_specs"].items()}
        towers = {}
        for name, spec in header["towers"].items():
            weights = [np.zeros(shape) for shape in spec["shapes"]]
            biases = [np.zeros(shape[0]) for shape in spec["shapes"]]
            towers[name] = TowerNetwork(weights, biases, spec["activations"])
        model = TriTowerModel(
            config=config, item_tables=item_tables, dense_specs=dense_specs,
            user_table=user_table, tag_table=tag_table,
            item_tower=towers["item_tower"], user_tower=towers["user_tower"],
            tag_tower=towers["tag_tower"])
        params = model.parameters()
        for meta in header["tensors"]:
            shape = tuple(meta["shape"])
            target = params[meta["name"]]
            if tuple(target.shape) != shape:
                raise ValidationError(
                    f"tensor {meta['name']} shape mismatch: "
                    f"{tuple(target.shape)} vs {shape}")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").astype(np.float64)
            target[...] = data.reshape(shape)
    return model
