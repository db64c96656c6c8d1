"""Episode sampling from a dataset partition.

Callers own the RNG: pass an explicit numpy Generator so independent
samplers never interfere and a fixed state replays the same episode.
"""

from __future__ import annotations

import numpy as np

from ..errors import SamplingError
from .types import DatasetIndex, Episode, SplitSpec


def eligible_categories(
    index: DatasetIndex, split: SplitSpec, partition: str, k_shot: int
) -> list[str]:
    """Partition categories with enough samples for k_shot support + 1 query."""
    names = sorted(split.partition(partition) & set(index.category_names()))
    return [name for name in names if index.num_samples(name) >= k_shot + 1]


def sample_episode(
    index: DatasetIndex,
    split: SplitSpec,
    partition: str,
    k_shot: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode: a uniform category, then support and query samples
    without replacement from it."""
    if k_shot < 1:
        raise ValueError(f"k_shot must be >= 1, got {k_shot}")
    candidates = eligible_categories(index, split, partition, k_shot)
    if not candidates:
        counts = {
            name: index.num_samples(name)
            for name in sorted(split.partition(partition) & set(index.category_names()))
        }
        raise SamplingError(
            f"no category in partition {partition!r} has >= {k_shot + 1} samples; "
            f"sample counts: {counts}"
        )
    category_name = candidates[int(rng.integers(len(candidates)))]
    category = index.category(category_name)
    n = index.num_samples(category_name)
    chosen = rng.choice(n, size=k_shot + 1, replace=False)
    support = tuple(index.load_sample(category_name, int(i)) for i in chosen[:-1])
    query = index.load_sample(category_name, int(chosen[-1]))
    return Episode(category=category, support=support, query=query, k_shot=k_shot)
