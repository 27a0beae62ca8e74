"""Product catalog: the item-side source of truth for retrieval,
category mapping, and explanation generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError
from .retrieval import ItemFeatures


@dataclass(frozen=True)
class Product:
    item_id: str
    title: str
    category: str
    brand: str = ""
    price: float | None = None
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.item_id or not self.title:
            raise ValidationError("product needs item_id and title")

    def features(self) -> ItemFeatures:
        sparse = {"item_id": self.item_id, "category": self.category}
        if self.brand:
            sparse["brand"] = self.brand
        dense = {"price": float(self.price)} if self.price is not None else {}
        return ItemFeatures(sparse=sparse, dense=dense)

    def info_text(self) -> str:
        parts = [self.title]
        if self.category:
            parts.append(f"category: {self.category}")
        if self.brand:
            parts.append(f"brand: {self.brand}")
        parts.extend(f"{k}: {v}" for k, v in self.attributes)
        return "; ".join(parts)

    def to_wire(self) -> dict:
        record = {"item_id": self.item_id, "title": self.title,
                  "category": self.category}
        if self.brand:
            record["brand"] = self.brand
        if self.price is not None:
            record["price"] = self.price
        if self.attributes:
            record["attrs"] = [list(kv) for kv in self.attributes]
        return record

    @classmethod
    def from_wire(cls, record: dict) -> "Product":
        return cls(item_id=record["item_id"], title=record["title"],
                   category=record.get("category", ""),
                   brand=record.get("brand", ""),
                   price=record.get("price"),
                   attributes=tuple((k, v) for k, v in record.get("attrs", [])))


class Catalog:
    def __init__(self, products: list[Product]):
        self.products: dict[str, Product] = {}
        for product in products:
            if product.item_id in self.products:
                raise ValidationError(f"duplicate item_id {product.item_id!r}")
            self.products[product.item_id] = product

    def __len__(self) -> int:
        return len(self.products)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.products

    def get(self, item_id: str) -> Product | None:
        return self.products.get(item_id)

    def ordered(self) -> list[Product]:
        return [self.products[i] for i in sorted(self.products)]

    def features_list(self) -> list[ItemFeatures]:
        return [product.features() for product in self.ordered()]

    def categories(self) -> dict[str, list[Product]]:
        grouped: dict[str, list[Product]] = {}
        for product in self.ordered():
            grouped.setdefault(product.category, []).append(product)
        return grouped

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = [product.to_wire() for product in self.ordered()]
        path.write_text(json.dumps(payload, ensure_ascii=False, indent=1),
                        encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Catalog":
        records = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([Product.from_wire(record) for record in records])
