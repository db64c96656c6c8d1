"""Core dataset model: part classes, categories, samples, episodes, splits.

Mask convention: value 0 is always background, values 1..N index the parts
of the sample's category in declaration order. Part names carry both the
raw label found in annotations ("Car body") and a normalized key ("body")
under which the same part is identified across categories.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataValidationError

BACKGROUND_ID = 0
BACKGROUND_NAME = "background"


def normalize_part_name(raw_name: str, category_name: str) -> str:
    """Cross-category part key: category stripped, lowercased, final token.

    "Car body" under category "Car" -> "body"; "wing" -> "wing". The rule
    is deterministic so two categories declaring the same part always map
    to the same key.
    """
    words = [w for w in raw_name.strip().lower().split() if w]
    cat_words = {w for w in category_name.strip().lower().split() if w}
    remaining = [w for w in words if w not in cat_words]
    if not remaining:
        remaining = words
    if not remaining:
        raise DataValidationError(f"part name {raw_name!r} normalizes to nothing")
    return remaining[-1]


@dataclass(frozen=True)
class PartClass:
    id: int
    raw_name: str
    normalized_name: str

    def __post_init__(self):
        if self.id < 1:
            raise DataValidationError(
                f"part id must be >= 1 (0 is reserved for background), got {self.id}"
            )


@dataclass(frozen=True)
class Category:
    name: str
    parts: tuple[PartClass, ...]

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DataValidationError(f"category {self.name!r} declares no parts")
        ids = [p.id for p in self.parts]
        if ids != list(range(1, len(ids) + 1)):
            raise DataValidationError(
                f"category {self.name!r}: part ids must be contiguous 1..N, got {ids}"
            )

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def part_by_id(self, part_id: int) -> PartClass:
        return self.parts[part_id - 1]


@dataclass(frozen=True)
class Sample:
    """One image/mask pair. image: float (3, H, W) in [0, 1]; mask: int (H, W)."""

    image: np.ndarray
    mask: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataValidationError(
                f"sample {self.sample_id!r}: image must be (3, H, W), got {self.image.shape}"
            )
        if self.mask.shape != self.image.shape[1:]:
            raise DataValidationError(
                f"sample {self.sample_id!r}: image {self.image.shape[1:]} and "
                f"mask {self.mask.shape} dimensions differ"
            )


@dataclass(frozen=True)
class Episode:
    """One few-shot task: K support samples plus a query of the same category.

    The query mask is carried for loss and metric computation only;
    inference paths must never read it.
    """

    category: Category
    support: tuple[Sample, ...]
    query: Sample
    k_shot: int

    def __post_init__(self):
        if self.k_shot < 1 or len(self.support) != self.k_shot:
            raise DataValidationError(
                f"episode needs k_shot >= 1 support samples, got {len(self.support)} for k_shot={self.k_shot}"
            )

    @property
    def sample_ids(self) -> dict:
        return {
            "category": self.category.name,
            "support": [s.sample_id for s in self.support],
            "query": self.query.sample_id,
        }


@dataclass(frozen=True)
class SplitSpec:
    split_id: int
    base_categories: frozenset[str]
    novel_categories: frozenset[str]

    def __post_init__(self):
        if self.base_categories & self.novel_categories:
            raise DataValidationError("base and novel category sets overlap")

    def partition(self, name: str) -> frozenset[str]:
        if name == "base":
            return self.base_categories
        if name == "novel":
            return self.novel_categories
        raise ValueError(f"unknown partition {name!r}, expected 'base' or 'novel'")

    def to_json_dict(self) -> dict:
        return {
            "base": sorted(self.base_categories),
            "novel": sorted(self.novel_categories),
        }


@dataclass(frozen=True)
class SampleLocator:
    sample_id: str
    image_path: Path
    mask_path: Path


@dataclass
class DatasetIndex:
    """Validated view of an on-disk dataset; immutable after construction."""

    root: Path
    categories: list[Category]
    samples_by_category: dict[str, list[SampleLocator]]
    image_size: tuple[int, int]
    _cache: dict = field(default_factory=dict, repr=False)

    def category(self, name: str) -> Category:
        for cat in self.categories:
            if cat.name == name:
                return cat
        raise KeyError(f"unknown category {name!r}")

    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    def num_samples(self, category_name: str) -> int:
        return len(self.samples_by_category[category_name])

    def part_vocabulary(self, category_names=None) -> list[str]:
        """Sorted normalized part names over the given categories (default: all)."""
        names = set()
        wanted = set(category_names) if category_names is not None else None
        for cat in self.categories:
            if wanted is not None and cat.name not in wanted:
                continue
            names.update(p.normalized_name for p in cat.parts)
        return sorted(names)

    def load_sample(self, category_name: str, position: int) -> Sample:
        """Load (and memoize) one sample; datasets here are desk-scale."""
        key = (category_name, position)
        if key not in self._cache:
            from .ingest import load_sample_from_locator

            locator = self.samples_by_category[category_name][position]
            self._cache[key] = load_sample_from_locator(
                locator, self.category(category_name)
            )
        return self._cache[key]

    def fingerprint(self) -> str:
        """Stable digest of category structure and sample counts."""
        payload = {
            cat.name: {
                "parts": [(p.id, p.normalized_name) for p in cat.parts],
                "count": len(self.samples_by_category[cat.name]),
            }
            for cat in self.categories
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()
