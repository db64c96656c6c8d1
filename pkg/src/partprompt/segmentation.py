"""Correlation logits, contrast losses, fused prediction, and the mIoU metric.

Logits are raw inner products between query feature vectors and prototype
vectors (no normalization or temperature by default; an optional
cosine/temperature mode exists for experiments). Losses are computed at
feature resolution against the downsampled query mask; the metric is
computed at image resolution on nearest-neighbor upsampled labels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .validation import check_finite


@dataclass(frozen=True)
class LogitVolume:
    """Correlation scores (H, W, K) for K active classes of one branch."""

    data: torch.Tensor
    class_ids: tuple[int, ...]
    branch: str

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != len(self.class_ids):
            raise ValueError(
                f"logit volume must be (H, W, {len(self.class_ids)}), got {tuple(self.data.shape)}"
            )


@dataclass
class SegmentationPrediction:
    """Predicted label grid at image resolution, plus optional probabilities."""

    labels: np.ndarray  # (H_img, W_img) int64, values are original class ids
    class_ids: tuple[int, ...]
    feature_probabilities: torch.Tensor | None = None  # (H, W, K)


@dataclass
class MiouReport:
    per_class_iou: list[float | None]  # None where the class union is empty
    mean_iou: float
    episode_count: int = 1

    @property
    def valid_classes(self) -> list[int]:
        return [k for k, iou in enumerate(self.per_class_iou) if iou is not None]

    def to_json_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "mean_iou": self.mean_iou,
            "episode_count": self.episode_count,
        }


def correlate(
    query_features: torch.Tensor,
    prototypes: torch.Tensor,
    class_ids: tuple[int, ...],
    branch: str = "visual",
    normalize: bool = False,
    temperature: float = 1.0,
) -> LogitVolume:
    """Inner-product correlation: logits[i, j, k] = <F[:, i, j], P[k]>.

    query_features: (C, H, W); prototypes: (K, C). With ``normalize`` both
    sides are L2-normalized and logits divided by ``temperature`` (off by
    default).
    """
    if query_features.ndim != 3:
        raise ValueError(f"query features must be (C, H, W), got {tuple(query_features.shape)}")
    if prototypes.ndim != 2 or prototypes.shape[1] != query_features.shape[0]:
        raise ValueError(
            f"prototypes must be (K, {query_features.shape[0]}), got {tuple(prototypes.shape)}"
        )
    if prototypes.shape[0] != len(class_ids):
        raise ValueError("class_ids must name every prototype row")
    feats = query_features
    protos = prototypes
    if normalize:
        feats = feats / feats.norm(dim=0, keepdim=True).clamp_min(1e-12)
        protos = protos / protos.norm(dim=1, keepdim=True).clamp_min(1e-12)
    logits = torch.einsum("chw,kc->hwk", feats, protos)
    if normalize:
        logits = logits / temperature
    return LogitVolume(data=logits, class_ids=tuple(class_ids), branch=branch)


def softmax_prob(logits: LogitVolume) -> torch.Tensor:
    """Per-pixel class probabilities with max-subtraction for stability."""
    check_finite(logits.data, "logits")
    shifted = logits.data - logits.data.max(dim=2, keepdim=True).values
    exp = shifted.exp()
    return exp / exp.sum(dim=2, keepdim=True)


def contrast_loss(
    probabilities: torch.Tensor,
    target_mask: torch.Tensor,
    class_ids: tuple[int, ...],
) -> torch.Tensor:
    """Mean negative log-probability of the true class over valid pixels.

    probabilities: (H, W, K) aligned with ``class_ids``; target_mask:
    (H, W) in original class-id space. Pixels whose true class is not
    among ``class_ids`` (absent in the support) are excluded. If every
    pixel is excluded the loss is a flagged zero and a warning is issued.
    """
    if probabilities.shape[:2] != target_mask.shape:
        raise ValueError(
            f"probabilities {tuple(probabilities.shape[:2])} and mask "
            f"{tuple(target_mask.shape)} disagree"
        )
    id_list = list(class_ids)
    if not id_list:
        raise ValueError("contrast loss requires at least one active class")
    position = torch.full((max(id_list) + 2,), -1, dtype=torch.long)
    for pos, cid in enumerate(id_list):
        position[cid] = pos
    clamped = target_mask.long().clamp(0, position.shape[0] - 1)
    target_pos = position[clamped]
    valid = (target_pos >= 0) & (target_mask <= max(id_list))
    # Mask values beyond the lookup table are invalid by construction.
    valid &= target_mask.long() == clamped
    if not bool(valid.any()):
        warnings.warn("contrast loss: no valid pixels; returning zero", stacklevel=2)
        return probabilities.sum() * 0.0
    gathered = probabilities.reshape(-1, probabilities.shape[2])[
        torch.arange(target_pos.numel()), target_pos.reshape(-1).clamp_min(0)
    ].reshape(target_mask.shape)
    log_p = gathered.clamp_min(1e-300).log()
    return -(log_p * valid.to(log_p.dtype)).sum() / valid.sum()


def total_loss(
    loss_visual: torch.Tensor,
    loss_textual: torch.Tensor | None,
    weight_visual: float = 1.0,
    weight_textual: float = 1.0,
) -> torch.Tensor:
    """Weighted sum of the two contrast losses; defaults to the plain sum."""
    if loss_textual is None:
        return weight_visual * loss_visual
    return weight_visual * loss_visual + weight_textual * loss_textual


def fuse_logits(
    visual: LogitVolume, textual: LogitVolume | None, alpha: float
) -> LogitVolume:
    """Convex combination alpha * visual + (1 - alpha) * textual.

    alpha=1 (or a missing textual branch) short-circuits to the visual
    volume so the fused prediction is bit-identical to the visual-only one.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if textual is None or alpha == 1.0:
        return LogitVolume(data=visual.data, class_ids=visual.class_ids, branch="fused")
    if alpha == 0.0:
        return LogitVolume(data=textual.data, class_ids=textual.class_ids, branch="fused")
    if visual.class_ids != textual.class_ids:
        raise ValueError(
            f"branch class sets differ: {visual.class_ids} vs {textual.class_ids}"
        )
    fused = alpha * visual.data + (1.0 - alpha) * textual.data
    return LogitVolume(data=fused, class_ids=visual.class_ids, branch="fused")


def upsample_labels(
    labels: np.ndarray, stride: int, image_shape: tuple[int, int]
) -> np.ndarray:
    """Nearest-neighbor upsample from feature to image resolution."""
    repeated = np.repeat(np.repeat(labels, stride, axis=0), stride, axis=1)
    return repeated[: image_shape[0], : image_shape[1]]


def predict_segmentation(
    visual: LogitVolume,
    textual: LogitVolume | None,
    alpha: float,
    stride: int,
    image_shape: tuple[int, int],
    keep_probabilities: bool = False,
) -> SegmentationPrediction:
    """Fused argmax prediction, upsampled to image resolution.

    Ties break toward the lowest class id (numpy argmax takes the first
    maximal entry, and logit columns are ordered by ascending class id).
    """
    if not visual.class_ids:
        raise ValueError("prediction requires at least one active class")
    fused = fuse_logits(visual, textual, alpha)
    scores = fused.data.detach().cpu().numpy()
    winners = scores.argmax(axis=2)
    id_array = np.asarray(fused.class_ids, dtype=np.int64)
    labels = upsample_labels(id_array[winners], stride, image_shape)
    probs = softmax_prob(fused) if keep_probabilities else None
    return SegmentationPrediction(
        labels=labels, class_ids=fused.class_ids, feature_probabilities=probs
    )


def miou(
    predicted: np.ndarray, target: np.ndarray, num_classes: int
) -> MiouReport:
    """Per-class intersection-over-union at image resolution.

    Classes 0..num_classes-1 are scored; a class with an empty union (it
    appears in neither grid) is excluded from the mean.
    """
    if predicted.shape != target.shape:
        raise ValueError(
            f"prediction {predicted.shape} and target {target.shape} shapes differ"
        )
    per_class: list[float | None] = []
    total, count = 0.0, 0
    for k in range(num_classes):
        pred_k = predicted == k
        gt_k = target == k
        union = int(np.logical_or(pred_k, gt_k).sum())
        if union == 0:
            per_class.append(None)
            continue
        inter = int(np.logical_and(pred_k, gt_k).sum())
        iou = inter / union
        per_class.append(iou)
        total += iou
        count += 1
    mean = total / count if count else math.nan
    return MiouReport(per_class_iou=per_class, mean_iou=mean)
