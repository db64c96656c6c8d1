from .ingest import ingest_dataset, load_sample_from_locator, mask_histogram
from .sampling import eligible_categories, sample_episode
from .splits import build_splits, novel_split_size, write_splits_file
from .synthetic import (
    CategorySpec,
    SynthConfig,
    default_synth_config,
    generate_synthetic_dataset,
    verify_mask_against_shapes,
)
from .types import (
    BACKGROUND_ID,
    BACKGROUND_NAME,
    Category,
    DatasetIndex,
    Episode,
    PartClass,
    Sample,
    SampleLocator,
    SplitSpec,
    normalize_part_name,
)

__all__ = [
    "BACKGROUND_ID",
    "BACKGROUND_NAME",
    "Category",
    "CategorySpec",
    "DatasetIndex",
    "Episode",
    "PartClass",
    "Sample",
    "SampleLocator",
    "SplitSpec",
    "SynthConfig",
    "build_splits",
    "default_synth_config",
    "eligible_categories",
    "generate_synthetic_dataset",
    "ingest_dataset",
    "load_sample_from_locator",
    "mask_histogram",
    "normalize_part_name",
    "novel_split_size",
    "sample_episode",
    "verify_mask_against_shapes",
    "write_splits_file",
]
