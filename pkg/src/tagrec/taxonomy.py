"""Tag-to-category mapping: exact keyword hits first, nearest category
centroid as the fallback, so every tag maps to some category."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog
from .errors import ValidationError
from .retrieval import EmbeddedCatalog, TriTowerModel, embed_item, embed_tag
from .tags import check_format
from .textproc import tokenize


@dataclass
class CategoryTaxonomy:
    names: dict[str, str]                      # category id -> display name
    keyword_index: dict[str, set[str]]         # token -> candidate categories
    centroid_ids: list[str]                    # sorted category ids
    centroids: np.ndarray                      # aligned with centroid_ids
    excluded: list[str] = field(default_factory=list)

    def save(self, path: Path | str) -> None:
        """JSON metadata plus a float32 binary sidecar for centroids."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "categories": [{"id": cid, "name": self.names[cid]}
                           for cid in sorted(self.names)],
            "keyword_index": {token: sorted(cats)
                              for token, cats in sorted(self.keyword_index.items())},
            "centroid_ids": self.centroid_ids,
            "dim": int(self.centroids.shape[1]) if self.centroids.size else 0,
            "excluded": self.excluded,
        }
        path.write_text(json.dumps(meta, ensure_ascii=False), encoding="utf-8")
        sidecar = path.with_suffix(path.suffix + ".centroids.bin")
        sidecar.write_bytes(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "CategoryTaxonomy":
        path = Path(path)
        meta = json.loads(path.read_text(encoding="utf-8"))
        sidecar = path.with_suffix(path.suffix + ".centroids.bin")
        dim = meta["dim"]
        raw = np.frombuffer(sidecar.read_bytes(), dtype="<f4").astype(np.float64)
        count = len(meta["centroid_ids"])
        centroids = raw.reshape(count, dim) if count else np.zeros((0, dim))
        return cls(
            names={c["id"]: c["name"] for c in meta["categories"]},
            keyword_index={token: set(cats)
                           for token, cats in meta["keyword_index"].items()},
            centroid_ids=list(meta["centroid_ids"]),
            centroids=centroids,
            excluded=list(meta.get("excluded", [])),
        )


def build_taxonomy(catalog: Catalog, model: TriTowerModel,
                   display_names: dict[str, str] | None = None) -> CategoryTaxonomy:
    """Centroid per category = mean of its items' tower vectors; the
    keyword index collects category-name and item-title tokens."""
    if len(catalog) == 0:
        raise ValidationError("cannot build a taxonomy from an empty catalog")
    display_names = display_names or {}
    grouped = catalog.categories()
    names: dict[str, str] = {}
    keyword_index: dict[str, set[str]] = {}
    centroid_ids: list[str] = []
    vectors: list[np.ndarray] = []
    excluded: list[str] = []
    for category in sorted(grouped):
        products = grouped[category]
        if not category or not products:
            excluded.append(category or "<empty>")
            continue
        names[category] = display_names.get(category, category)
        tokens = set(tokenize(category)) | set(tokenize(names[category]))
        for product in products:
            tokens |= set(tokenize(product.title))
        for token in tokens:
            keyword_index.setdefault(token, set()).add(category)
        centroid_ids.append(category)
        vectors.append(np.mean(
            [embed_item(model, product.features()) for product in products], axis=0))
    return CategoryTaxonomy(
        names=names,
        keyword_index=keyword_index,
        centroid_ids=centroid_ids,
        centroids=np.stack(vectors),
        excluded=excluded,
    )


def map_tag(taxonomy: CategoryTaxonomy, model: TriTowerModel, tag: str) -> str:
    """Total, deterministic mapping from tag text to a category id.

    Core-word tokens hitting exactly one category win outright;
    otherwise the nearest centroid by dot product decides, ties broken
    by ascending category id.
    """
    ok, _, core = check_format(tag)
    tokens = tokenize(core if ok else tag) or tokenize(tag)
    candidates: set[str] = set()
    for token in tokens:
        candidates |= taxonomy.keyword_index.get(token, set())
    if len(candidates) == 1:
        return next(iter(candidates))
    h_t = embed_tag(model, tag)
    scores = taxonomy.centroids @ h_t
    order = sorted(range(len(taxonomy.centroid_ids)),
                   key=lambda i: (-scores[i], taxonomy.centroid_ids[i]))
    return taxonomy.centroid_ids[order[0]]


class TagMapper:
    """Callable phi(tag) -> category binding a taxonomy and model."""

    def __init__(self, taxonomy: CategoryTaxonomy, model: TriTowerModel):
        self.taxonomy = taxonomy
        self.model = model

    def __call__(self, tag: str) -> str:
        return map_tag(self.taxonomy, self.model, tag)
