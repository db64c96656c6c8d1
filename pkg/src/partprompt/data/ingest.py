"""Loading and eager validation of on-disk datasets.

Expected layout under a dataset root:

    manifest.json            categories, parts, sample locators, image size
    images/<cat>/<id>.png    8-bit RGB
    masks/<cat>/<id>.png     8-bit single-channel indexed; value = part id, 0 = background
    splits.json              optional; split_id -> {base, novel}
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataValidationError
from .synthetic import MANIFEST_SCHEMA_VERSION, load_manifest
from .types import Category, DatasetIndex, PartClass, Sample, SampleLocator


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise DataValidationError(
                f"mask {path} must be single-channel indexed, got mode {img.mode!r}"
            )
        return np.asarray(img, dtype=np.int64)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def load_sample_from_locator(locator: SampleLocator, category: Category) -> Sample:
    image = _read_image(locator.image_path)
    mask = _read_mask(locator.mask_path)
    if mask.shape != image.shape[1:]:
        raise DataValidationError(
            f"{locator.mask_path}: mask {mask.shape} does not match image {image.shape[1:]}"
        )
    if mask.max(initial=0) > category.num_parts:
        raise DataValidationError(
            f"{locator.mask_path}: mask value {int(mask.max())} exceeds the "
            f"{category.num_parts} parts declared for category {category.name!r}"
        )
    return Sample(image=image, mask=mask, sample_id=locator.sample_id)


def ingest_dataset(root: Path) -> DatasetIndex:
    """Build a validated DatasetIndex from ``root``.

    Validation is eager: every referenced file must exist, parse, match the
    declared image size and stay within its category's part-id range.
    Raises DataValidationError naming the offending file.
    """
    root = Path(root)
    manifest = load_manifest(root)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataValidationError(
            f"unsupported manifest schema_version {manifest.get('schema_version')!r}"
        )

    declared_size = tuple(manifest["image_size"])
    categories: list[Category] = []
    samples_by_category: dict[str, list[SampleLocator]] = {}

    for cat_entry in manifest["categories"]:
        parts = tuple(
            PartClass(
                id=p["id"],
                raw_name=p["raw_name"],
                normalized_name=p["normalized_name"],
            )
            for p in cat_entry["parts"]
        )
        category = Category(name=cat_entry["name"], parts=parts)
        categories.append(category)

        locators = []
        for record in manifest["samples"].get(category.name, []):
            locator = SampleLocator(
                sample_id=record["id"],
                image_path=root / record["image"],
                mask_path=root / record["mask"],
            )
            if not locator.image_path.is_file():
                raise DataValidationError(f"missing image file {locator.image_path}")
            if not locator.mask_path.is_file():
                raise DataValidationError(f"missing mask file {locator.mask_path}")
            sample = load_sample_from_locator(locator, category)
            if sample.mask.shape != declared_size:
                raise DataValidationError(
                    f"{locator.mask_path}: size {sample.mask.shape} does not match "
                    f"manifest image_size {declared_size}"
                )
            locators.append(locator)
        if not locators:
            raise DataValidationError(f"category {category.name!r} has no samples")
        samples_by_category[category.name] = locators

    if not categories:
        raise DataValidationError(f"manifest at {root} declares no categories")

    return DatasetIndex(
        root=root,
        categories=categories,
        samples_by_category=samples_by_category,
        image_size=declared_size,
    )


def mask_histogram(index: DatasetIndex, category_name: str, position: int) -> dict[int, int]:
    """Pixel count per mask value for one sample (used by round-trip checks)."""
    sample = index.load_sample(category_name, position)
    values, counts = np.unique(sample.mask, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}
