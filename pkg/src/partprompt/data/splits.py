"""Deterministic base/novel split construction.

The four split ids are windows into one seeded shuffle of the category
list, so splits are reproducible from (index fingerprint, split_id, seed)
and jointly rotate categories through the novel role. The novel set holds
max(1, n_categories // 4) categories; with 4 * that many >= n_categories
every category is novel in at least one split.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .types import DatasetIndex, SplitSpec

NUM_SPLITS = 4


def novel_split_size(num_categories: int) -> int:
    return max(1, num_categories // NUM_SPLITS)


def build_splits(index: DatasetIndex, split_id: int, seed: int) -> SplitSpec:
    """Partition the index's categories into disjoint base/novel sets."""
    if not isinstance(split_id, int) or isinstance(split_id, bool):
        raise ValueError(f"split_id must be an integer, got {split_id!r}")
    if not (0 <= split_id < NUM_SPLITS):
        raise ValueError(f"split_id must be in 0..{NUM_SPLITS - 1}, got {split_id}")
    names = sorted(index.category_names())
    if len(names) < 3:
        raise ConfigurationError(
            f"split construction needs >= 3 categories, got {len(names)}"
        )

    digest = hashlib.blake2b(
        f"{index.fingerprint()}:{seed}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    shuffled = list(rng.permutation(names))

    size = novel_split_size(len(names))
    novel = {shuffled[(split_id * size + i) % len(names)] for i in range(size)}
    base = set(names) - novel
    return SplitSpec(
        split_id=split_id,
        base_categories=frozenset(base),
        novel_categories=frozenset(novel),
    )


def write_splits_file(index: DatasetIndex, seed: int, path: Path) -> Path:
    """Emit splits.json mapping every split_id to its {base, novel} sets."""
    payload = {
        str(split_id): build_splits(index, split_id, seed).to_json_dict()
        for split_id in range(NUM_SPLITS)
    }
    path = Path(path)
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path
