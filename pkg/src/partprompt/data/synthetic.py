"""Procedural part-annotated dataset: colored geometric parts on noise.

Each category composes 2-5 parts from a shared vocabulary (body, head,
limb, ...). A part is rendered as one or more analytic primitives
(ellipses and rotated boxes) whose parameters are jittered per sample, so
masks are pixel-exact by construction and the primitives can be replayed
from the manifest to audit any pixel label.

Color is informative but deliberately unreliable: every sample draws a
global brightness factor, per-part color jitter, a category-specific
sinusoidal texture, and pixel noise. Raw color pooling therefore gives a
weak segmenter and leaves room for a trained encoder to improve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigurationError, DataValidationError
from .types import normalize_part_name

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1

# Shared part vocabulary: normalized name -> base RGB in [0, 1].
PART_COLORS = {
    "body": (0.35, 0.62, 0.30),
    "head": (0.75, 0.30, 0.25),
    "limb": (0.25, 0.40, 0.75),
    "tail": (0.80, 0.70, 0.25),
    "wing": (0.70, 0.35, 0.70),
    "fin": (0.25, 0.70, 0.70),
    "horn": (0.85, 0.55, 0.20),
    "shell": (0.55, 0.45, 0.30),
}

BACKGROUND_COLOR = (0.50, 0.50, 0.50)


@dataclass(frozen=True)
class Primitive:
    """Analytic shape in unit coordinates ((0,0) top-left, (1,1) bottom-right).

    kind "ellipse": params (cx, cy, rx, ry, angle);
    kind "box": params (cx, cy, half_w, half_h, angle).
    """

    kind: str
    params: tuple[float, ...]

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        cx, cy, a, b, angle = self.params
        dx, dy = xs - cx, ys - cy
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        u = dx * cos_a + dy * sin_a
        v = -dx * sin_a + dy * cos_a
        if self.kind == "ellipse":
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if self.kind == "box":
            return (np.abs(u) <= a) & (np.abs(v) <= b)
        raise ValueError(f"unknown primitive kind {self.kind!r}")


# Canonical layouts: category -> part name -> list of primitives.
_ZOO: dict[str, dict[str, list[Primitive]]] = {
    "quad": {
        "body": [Primitive("ellipse", (0.50, 0.55, 0.26, 0.15, 0.0))],
        "head": [Primitive("ellipse", (0.79, 0.40, 0.10, 0.09, 0.0))],
        "limb": [
            Primitive("box", (0.36, 0.78, 0.040, 0.12, 0.0)),
            Primitive("box", (0.62, 0.78, 0.040, 0.12, 0.0)),
        ],
        "tail": [Primitive("box", (0.16, 0.44, 0.10, 0.035, -0.45))],
    },
    "biped": {
        "body": [Primitive("ellipse", (0.50, 0.46, 0.17, 0.22, 0.0))],
        "head": [Primitive("ellipse", (0.50, 0.15, 0.10, 0.09, 0.0))],
        "limb": [
            Primitive("box", (0.41, 0.82, 0.045, 0.13, 0.0)),
            Primitive("box", (0.59, 0.82, 0.045, 0.13, 0.0)),
        ],
    },
    "bird": {
        "body": [Primitive("ellipse", (0.48, 0.55, 0.21, 0.14, 0.0))],
        "head": [Primitive("ellipse", (0.74, 0.37, 0.085, 0.08, 0.0))],
        "wing": [Primitive("ellipse", (0.44, 0.43, 0.15, 0.075, 0.55))],
        "tail": [Primitive("box", (0.20, 0.63, 0.10, 0.04, 0.40))],
    },
    "fish": {
        "body": [Primitive("ellipse", (0.54, 0.50, 0.24, 0.13, 0.0))],
        "fin": [Primitive("box", (0.54, 0.30, 0.055, 0.085, 0.20))],
        "tail": [Primitive("box", (0.20, 0.50, 0.075, 0.095, 0.0))],
    },
    "beetle": {
        "body": [Primitive("ellipse", (0.50, 0.58, 0.19, 0.15, 0.0))],
        "head": [Primitive("ellipse", (0.50, 0.30, 0.09, 0.075, 0.0))],
        "limb": [
            Primitive("box", (0.24, 0.60, 0.09, 0.030, 0.55)),
            Primitive("box", (0.76, 0.60, 0.09, 0.030, -0.55)),
        ],
        "wing": [
            Primitive("ellipse", (0.42, 0.56, 0.075, 0.115, 0.20)),
            Primitive("ellipse", (0.58, 0.56, 0.075, 0.115, -0.20)),
        ],
    },
    "snake": {
        "body": [Primitive("ellipse", (0.50, 0.60, 0.31, 0.075, 0.15))],
        "head": [Primitive("ellipse", (0.83, 0.47, 0.075, 0.06, 0.0))],
        "tail": [Primitive("ellipse", (0.16, 0.68, 0.095, 0.045, -0.30))],
    },
    "crab": {
        "body": [Primitive("ellipse", (0.50, 0.55, 0.20, 0.13, 0.0))],
        "shell": [Primitive("ellipse", (0.50, 0.48, 0.155, 0.085, 0.0))],
        "limb": [
            Primitive("box", (0.22, 0.68, 0.095, 0.030, 0.65)),
            Primitive("box", (0.78, 0.68, 0.095, 0.030, -0.65)),
        ],
    },
    "goat": {
        "body": [Primitive("ellipse", (0.48, 0.56, 0.24, 0.14, 0.0))],
        "head": [Primitive("ellipse", (0.77, 0.38, 0.09, 0.085, 0.0))],
        "horn": [Primitive("box", (0.82, 0.20, 0.030, 0.095, 0.35))],
        "limb": [
            Primitive("box", (0.36, 0.80, 0.038, 0.115, 0.0)),
            Primitive("box", (0.60, 0.80, 0.038, 0.115, 0.0)),
        ],
    },
}


@dataclass(frozen=True)
class CategorySpec:
    name: str
    part_names: tuple[str, ...]


@dataclass(frozen=True)
class SynthConfig:
    categories: tuple[CategorySpec, ...]
    image_size: int = 64
    samples_per_category: int = 40
    jitter_position: float = 0.05
    jitter_scale: float = 0.15
    jitter_brightness: float = 0.30
    color_jitter: float = 0.10
    texture_amplitude: float = 0.25
    noise_sigma: float = 0.14

    def __post_init__(self):
        if len(self.categories) < 3:
            raise ConfigurationError(
                f"synthetic dataset needs >= 3 categories, got {len(self.categories)}"
            )
        for spec in self.categories:
            if not (2 <= len(spec.part_names) <= 5):
                raise ConfigurationError(
                    f"category {spec.name!r} must compose 2-5 parts, got {len(spec.part_names)}"
                )
            unknown = [p for p in spec.part_names if p not in PART_COLORS]
            if unknown:
                raise ConfigurationError(
                    f"category {spec.name!r} uses parts outside the vocabulary: {unknown}"
                )
            if spec.name not in _ZOO:
                raise ConfigurationError(f"no layout known for category {spec.name!r}")
        shared = _shared_part_names(self.categories)
        if not shared:
            raise ConfigurationError(
                "at least two categories must share a normalized part name"
            )
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if self.samples_per_category < 2:
            raise ConfigurationError("samples_per_category must be >= 2")


def _shared_part_names(categories) -> set[str]:
    counts: dict[str, int] = {}
    for spec in categories:
        for name in set(spec.part_names):
            counts[name] = counts.get(name, 0) + 1
    return {name for name, n in counts.items() if n >= 2}


def default_synth_config(
    num_categories: int = 6, samples_per_category: int = 40, image_size: int = 64
) -> SynthConfig:
    """Built-in zoo configuration; categories are taken in a fixed order."""
    zoo_order = ["quad", "biped", "bird", "fish", "beetle", "snake", "crab", "goat"]
    if num_categories > len(zoo_order):
        raise ConfigurationError(
            f"built-in zoo has {len(zoo_order)} categories, requested {num_categories}"
        )
    if num_categories < 3:
        raise ConfigurationError(
            f"synthetic dataset needs >= 3 categories, got {num_categories}"
        )
    specs = tuple(
        CategorySpec(name, tuple(_ZOO[name].keys())) for name in zoo_order[:num_categories]
    )
    return SynthConfig(
        categories=specs,
        image_size=image_size,
        samples_per_category=samples_per_category,
    )


def _category_texture(name: str, size: int) -> np.ndarray:
    """Deterministic per-category multiplicative texture field, mean ~1."""
    digest = int.from_bytes(name.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    fx = 2 + digest % 4
    fy = 2 + (digest // 7) % 4
    phase_x = (digest % 628) / 100.0
    phase_y = ((digest // 13) % 628) / 100.0
    ys, xs = np.mgrid[0:size, 0:size] / size
    return np.sin(2 * math.pi * fx * xs + phase_x) * np.sin(2 * math.pi * fy * ys + phase_y)


def _jitter_primitive(prim: Primitive, rng: np.random.Generator, cfg: SynthConfig) -> Primitive:
    cx, cy, a, b, angle = prim.params
    cx += rng.uniform(-cfg.jitter_position, cfg.jitter_position)
    cy += rng.uniform(-cfg.jitter_position, cfg.jitter_position)
    scale = 1.0 + rng.uniform(-cfg.jitter_scale, cfg.jitter_scale)
    angle += rng.uniform(-0.15, 0.15)
    return Primitive(prim.kind, (cx, cy, a * scale, b * scale, angle))


def render_sample(
    spec: CategorySpec, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Render one sample.

    Returns (image uint8 (H, W, 3), mask uint8 (H, W), shape records).
    Parts are painted in declaration order, so a later part may occlude an
    earlier one; every painted pixel stays inside its own part's primitive.
    """
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size]
    # Pixel centers in unit coordinates.
    xs_u = (xs + 0.5) / size
    ys_u = (ys + 0.5) / size

    mask = np.zeros((size, size), dtype=np.uint8)
    color = np.empty((size, size, 3), dtype=np.float64)
    color[:] = BACKGROUND_COLOR

    brightness = 1.0 + rng.uniform(-cfg.jitter_brightness, cfg.jitter_brightness)
    shape_records: list[dict] = []

    for part_id, part_name in enumerate(spec.part_names, start=1):
        base = np.asarray(PART_COLORS[part_name])
        tint = base + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        for prim in _ZOO[spec.name][part_name]:
            jittered = _jitter_primitive(prim, rng, cfg)
            inside = jittered.contains(xs_u, ys_u)
            mask[inside] = part_id
            color[inside] = tint
            shape_records.append(
                {
                    "part_id": part_id,
                    "kind": jittered.kind,
                    "params": [round(float(v), 6) for v in jittered.params],
                }
            )

    texture = 1.0 + cfg.texture_amplitude * _category_texture(spec.name, size)
    image = color * brightness * texture[..., None]
    image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return (image * 255.0).round().astype(np.uint8), mask, shape_records


_MASK_PALETTE = [0, 0, 0] + [
    c for rgb in PART_COLORS.values() for c in (np.asarray(rgb) * 255).astype(int).tolist()
]


def _save_mask(mask: np.ndarray, path: Path) -> None:
    img = Image.fromarray(mask, mode="P")
    img.putpalette(_MASK_PALETTE + [0] * (768 - len(_MASK_PALETTE)))
    img.save(path)


def generate_synthetic_dataset(config: SynthConfig, seed: int, root: Path):
    """Write images, indexed masks and the manifest under ``root``.

    Deterministic: the same (config, seed) produces a byte-identical
    manifest and identical image files. Returns the ingested DatasetIndex,
    so the returned object has passed the same validation as any on-disk
    dataset.
    """
    from .ingest import ingest_dataset

    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"dataset root {root} is not writable: {exc}") from exc

    rng = np.random.Generator(np.random.PCG64(seed))
    manifest: dict = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "image_size": [config.image_size, config.image_size],
        "categories": [],
        "samples": {},
    }

    for spec in config.categories:
        parts = [
            {
                "id": part_id,
                "raw_name": f"{spec.name} {part_name}",
                "normalized_name": normalize_part_name(
                    f"{spec.name} {part_name}", spec.name
                ),
            }
            for part_id, part_name in enumerate(spec.part_names, start=1)
        ]
        manifest["categories"].append({"name": spec.name, "parts": parts})

        img_dir = root / "images" / spec.name
        mask_dir = root / "masks" / spec.name
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)

        records = []
        for i in range(config.samples_per_category):
            sample_id = f"{spec.name}_{i:03d}"
            image, mask, shapes = render_sample(spec, config, rng)
            image_rel = f"images/{spec.name}/{sample_id}.png"
            mask_rel = f"masks/{spec.name}/{sample_id}.png"
            Image.fromarray(image, mode="RGB").save(root / image_rel)
            _save_mask(mask, root / mask_rel)
            records.append(
                {"id": sample_id, "image": image_rel, "mask": mask_rel, "shapes": shapes}
            )
        manifest["samples"][spec.name] = records

    manifest_blob = json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False)
    (root / MANIFEST_NAME).write_text(manifest_blob + "\n", encoding="utf-8")

    return ingest_dataset(root)


def replay_primitive(record: dict) -> Primitive:
    """Rebuild the analytic primitive stored in a manifest shape record."""
    return Primitive(record["kind"], tuple(record["params"]))


def verify_mask_against_shapes(
    mask: np.ndarray, shape_records: list[dict]
) -> bool:
    """Check that every pixel labeled k lies inside a recorded part-k shape."""
    size_y, size_x = mask.shape
    ys, xs = np.mgrid[0:size_y, 0:size_x]
    xs_u = (xs + 0.5) / size_x
    ys_u = (ys + 0.5) / size_y
    for part_id in np.unique(mask):
        if part_id == 0:
            continue
        covered = np.zeros_like(mask, dtype=bool)
        for record in shape_records:
            if record["part_id"] == int(part_id):
                covered |= replay_primitive(record).contains(xs_u, ys_u)
        if not covered[mask == part_id].all():
            return False
    return True


def load_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DataValidationError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
