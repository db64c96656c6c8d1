"""Part-level visual prototypes via masked average pooling.

A prototype for class k is the mean of all feature vectors whose (feature
resolution) mask label equals k. K-shot episodes pool the pixel union
across shots in a single mean, which reduces to the per-shot mean at K=1
and equals the pixel-count-weighted mean of per-shot prototypes otherwise.
Classes without any support pixel are flagged absent rather than
zero-filled; callers must not read an absent prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data.types import BACKGROUND_ID
from .encoders import FeatureMap


@dataclass
class VisualPrototypeSet:
    """Prototypes indexed 0..N (0 = background) plus per-class presence."""

    prototypes: torch.Tensor  # (N + 1, C); rows of absent classes are undefined
    present: list[bool]

    def __post_init__(self):
        if self.prototypes.shape[0] != len(self.present):
            raise ValueError("presence flags must cover every class row")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def vector(self, class_id: int) -> torch.Tensor:
        if not self.present[class_id]:
            raise ValueError(f"class {class_id} has no support pixels; prototype undefined")
        return self.prototypes[class_id]

    def present_class_ids(self) -> list[int]:
        return [k for k, ok in enumerate(self.present) if ok]


def downsample_mask(mask: torch.Tensor, stride: int) -> torch.Tensor:
    """Nearest-neighbor label downsampling at feature-cell centers.

    Output cell (i, j) takes the label of image pixel
    (i * stride + stride // 2, j * stride + stride // 2); cells whose
    center falls past the image edge (partial cells on odd sizes) read the
    background-padded mask, i.e. label 0. Stride 1 is the identity.
    """
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {tuple(mask.shape)}")
    if stride == 1:
        return mask
    h, w = mask.shape
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    centers_y = torch.arange(out_h) * stride + stride // 2
    centers_x = torch.arange(out_w) * stride + stride // 2
    padded = torch.zeros(
        (out_h * stride, out_w * stride), dtype=mask.dtype, device=mask.device
    )
    padded[:h, :w] = mask
    return padded[centers_y][:, centers_x]


def masked_average_pool(
    features: torch.Tensor, mask: torch.Tensor, class_id: int
) -> tuple[torch.Tensor, bool]:
    """Mean feature vector over pixels labeled ``class_id``.

    features: (C, H, W); mask: (H, W) with the same spatial dims. Returns
    (vector, present). When no pixel carries the class, present is False
    and the returned vector is undefined (callers must not read it).
    """
    if features.ndim != 3:
        raise ValueError(f"features must be (C, H, W), got {tuple(features.shape)}")
    if mask.shape != features.shape[1:]:
        raise ValueError(
            f"mask {tuple(mask.shape)} does not match feature grid {tuple(features.shape[1:])}"
        )
    selected = mask == class_id
    count = int(selected.sum())
    if count == 0:
        return torch.zeros(features.shape[0], dtype=features.dtype), False
    pooled = (features * selected.to(features.dtype)).sum(dim=(1, 2)) / count
    return pooled, True


def compute_prototype_set(
    support_features: list[FeatureMap],
    support_masks: list[torch.Tensor],
    num_parts: int,
) -> VisualPrototypeSet:
    """Pool prototypes for classes 0..num_parts over all support shots jointly.

    support_masks must already be at feature resolution. The pixel union
    across shots feeds a single mean per class; background (class 0) pools
    every pixel labeled 0.
    """
    if len(support_features) != len(support_masks) or not support_features:
        raise ValueError("need one mask per support feature map, at least one shot")
    for fmap, mask in zip(support_features, support_masks):
        if mask.shape != fmap.spatial:
            raise ValueError(
                f"support mask {tuple(mask.shape)} does not match features {fmap.spatial}"
            )

    flat_features = torch.cat([f.data.flatten(1) for f in support_features], dim=1)
    flat_mask = torch.cat([m.flatten() for m in support_masks])

    rows, present = [], []
    for class_id in range(BACKGROUND_ID, num_parts + 1):
        vector, ok = masked_average_pool(flat_features.unsqueeze(-1), flat_mask.unsqueeze(-1), class_id)
        rows.append(vector)
        present.append(ok)
    return VisualPrototypeSet(prototypes=torch.stack(rows), present=present)
