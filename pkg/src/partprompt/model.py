"""The assembled episodic segmenter: encoders, prototypes, prompts, losses.

One module owns every trainable piece so the optimizer and the checkpoint
format can enumerate parameters by name. The forward path for a single
episode is:

    support/query images -> feature maps (shared encoder)
    support features + downsampled masks -> visual prototypes per class
    prototypes (+ shared bank + label tokens) -> prompts -> textual prototypes
    query features x prototypes -> two logit volumes -> contrast losses

Background (mask value 0) participates as an ordinary class by default:
its visual prototype pools all background pixels and its prompt is built
from the pseudo part name "background". Setting
``background_in_softmax=False`` removes class 0 from logits and losses
instead, in which case background pixels are excluded from the loss and
the model never predicts background.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data.types import BACKGROUND_ID, BACKGROUND_NAME, Category, Episode
from .determinism import generator_for
from .encoders import EncoderBundle, FeatureMap, TokenSequence, tokenize_part_label
from .prompts import (
    GlobalTokenGenerator,
    PromptDesign,
    SharedTokenBank,
    SpecificTokenGenerator,
    assemble_prompt,
    compose_visual_tokens,
    generate_specific_tokens,
    select_prompt_design,
)
from .prototypes import VisualPrototypeSet, compute_prototype_set, downsample_mask
from .segmentation import (
    LogitVolume,
    SegmentationPrediction,
    contrast_loss,
    correlate,
    predict_segmentation,
    softmax_prob,
    total_loss,
)


@dataclass
class EpisodeForward:
    """Everything the trainer needs from one episode forward pass."""

    loss_visual: torch.Tensor
    loss_textual: torch.Tensor | None
    loss_total: torch.Tensor
    active_class_ids: tuple[int, ...]
    visual_logits: LogitVolume
    textual_logits: LogitVolume | None
    bank_keys_used: tuple[str, ...]


class PartSegmenter(nn.Module):
    """Few-shot part segmentation model with prompt-conditioned text branch."""

    def __init__(
        self,
        bundle: EncoderBundle,
        design: str = "ppl",
        n_specific: int = 4,
        n_shared: int = 4,
        n_text: int = 4,
        momentum: float = 0.99,
        background_in_softmax: bool = True,
        learned_background: bool = False,
        loss_weight_visual: float = 1.0,
        loss_weight_textual: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        self.bundle = bundle
        self.design: PromptDesign = select_prompt_design(design)
        self.n_specific = n_specific
        self.n_shared = n_shared
        self.n_text = n_text
        self.momentum = momentum
        self.background_in_softmax = background_in_softmax
        self.loss_weight_visual = loss_weight_visual
        self.loss_weight_textual = loss_weight_textual
        self.seed = seed

        channels = bundle.channels
        token_dim = bundle.text.token_dim
        dtype = next(bundle.parameters()).dtype

        self.specific_generator = None
        self.global_generator = None
        self.bank = None
        self.background_vector = None
        if self.design.uses_specific:
            self.specific_generator = SpecificTokenGenerator(channels, n_specific, token_dim)
            _seeded_init(self.specific_generator, generator_for(seed, "specific_generator"))
        if self.design.uses_global:
            self.global_generator = GlobalTokenGenerator(channels, n_specific, token_dim)
            _seeded_init(self.global_generator, generator_for(seed, "global_generator"))
        if self.design.uses_shared:
            self.bank = SharedTokenBank(
                n_tokens=n_shared, token_dim=token_dim, momentum=momentum, seed=seed
            )
        if learned_background and background_in_softmax:
            # Alternative to pooling background pixels: one trainable vector.
            gen = generator_for(seed, "background_vector")
            self.background_vector = nn.Parameter(
                torch.randn(channels, generator=gen, dtype=torch.float64) * 0.02
            )
        self.to(dtype)

    # -- vocabulary -----------------------------------------------------

    def register_part_vocabulary(self, normalized_names) -> None:
        """Create bank entries for every trainable part name up front."""
        if self.bank is None:
            return
        names = set(normalized_names)
        if self.background_in_softmax:
            names.add(BACKGROUND_NAME)
        self.bank.ensure_keys(sorted(names))
        self.bank.to(next(self.bundle.parameters()).dtype)

    # -- episode plumbing -----------------------------------------------

    def encode_episode(self, episode: Episode):
        dtype = next(self.bundle.parameters()).dtype
        support_maps, support_masks = [], []
        for sample in episode.support:
            fmap = self.bundle.encode_image(
                torch.as_tensor(sample.image, dtype=dtype)
            )
            support_maps.append(fmap)
            support_masks.append(
                downsample_mask(torch.as_tensor(sample.mask), fmap.stride)
            )
        query_map = self.bundle.encode_image(
            torch.as_tensor(episode.query.image, dtype=dtype)
        )
        query_mask = downsample_mask(torch.as_tensor(episode.query.mask), query_map.stride)
        return support_maps, support_masks, query_map, query_mask

    def class_name(self, category: Category, class_id: int) -> str:
        if class_id == BACKGROUND_ID:
            return BACKGROUND_NAME
        return category.part_by_id(class_id).normalized_name

    def episode_prototypes(self, support_maps, support_masks, num_parts: int) -> VisualPrototypeSet:
        prototypes = compute_prototype_set(support_maps, support_masks, num_parts)
        if self.background_vector is None:
            return prototypes
        rows = torch.cat(
            [self.background_vector.unsqueeze(0), prototypes.prototypes[1:]], dim=0
        )
        return VisualPrototypeSet(prototypes=rows, present=[True] + prototypes.present[1:])

    def active_classes(self, prototypes: VisualPrototypeSet) -> list[int]:
        ids = prototypes.present_class_ids()
        if not self.background_in_softmax:
            ids = [k for k in ids if k != BACKGROUND_ID]
        return ids

    # -- prompt and textual branch ---------------------------------------

    def build_prompt(
        self,
        name: str,
        prototype: torch.Tensor | None,
        global_block: torch.Tensor | None,
        training: bool,
    ) -> tuple[TokenSequence, str | None]:
        """Prompt for one part; returns the bank key consumed (if any).

        Unknown bank keys (novel part names at evaluation time) fall back
        to an empty shared block so no optimization is ever required.
        """
        dtype = next(self.bundle.parameters()).dtype
        if self.design.uses_global:
            specific = global_block
        elif self.design.uses_specific:
            specific = generate_specific_tokens(self.specific_generator, prototype)
        else:
            specific = torch.zeros((0, self.bundle.text.token_dim), dtype=dtype)

        key_used = None
        if self.design.uses_shared and self.bank is not None and self.bank.has(name):
            shared = self.bank.training_tokens(name, training=training)
            key_used = name
        elif self.design.uses_shared and self.bank is not None:
            shared = self.bank.empty_block(dtype)
        else:
            shared = torch.zeros((0, self.bundle.text.token_dim), dtype=dtype)

        visual_tokens, labels = compose_visual_tokens(specific, shared)
        text_block = tokenize_part_label(
            name, n_text=self.n_text, token_dim=self.bundle.text.token_dim, dtype=dtype
        )
        prompt = assemble_prompt(
            visual_tokens, labels, text_block, self.bundle.text.context_limit
        )
        return prompt, key_used

    def textual_prototypes(
        self,
        category: Category,
        prototypes: VisualPrototypeSet,
        class_ids: list[int],
        support_maps: list[FeatureMap],
        training: bool,
    ) -> tuple[torch.Tensor, tuple[str, ...]]:
        """Text-branch prototype per active class, stacked in class order."""
        global_block = None
        if self.design.uses_global:
            pooled = torch.stack(
                [fmap.data.mean(dim=(1, 2)) for fmap in support_maps]
            ).mean(dim=0)
            global_block = self.global_generator(pooled)

        rows, keys = [], []
        for class_id in class_ids:
            name = self.class_name(category, class_id)
            prompt, key = self.build_prompt(
                name, prototypes.prototypes[class_id], global_block, training
            )
            rows.append(self.bundle.encode_text(prompt))
            if key is not None:
                keys.append(key)
        return torch.stack(rows), tuple(dict.fromkeys(keys))

    # -- forward / predict -----------------------------------------------

    def forward_episode(self, episode: Episode, training: bool = True) -> EpisodeForward:
        support_maps, support_masks, query_map, query_mask = self.encode_episode(episode)
        prototypes = self.episode_prototypes(
            support_maps, support_masks, episode.category.num_parts
        )
        class_ids = self.active_classes(prototypes)
        if not class_ids:
            raise ValueError(
                f"episode of category {episode.category.name!r} has no usable support pixels"
            )
        id_tuple = tuple(class_ids)

        visual_logits = correlate(
            query_map.data, prototypes.prototypes[class_ids], id_tuple, branch="visual"
        )
        loss_visual = contrast_loss(softmax_prob(visual_logits), query_mask, id_tuple)

        loss_textual = None
        textual_logits = None
        keys_used: tuple[str, ...] = ()
        if self.design.uses_text_branch:
            text_protos, keys_used = self.textual_prototypes(
                episode.category, prototypes, class_ids, support_maps, training
            )
            textual_logits = correlate(
                query_map.data, text_protos, id_tuple, branch="textual"
            )
            loss_textual = contrast_loss(
                softmax_prob(textual_logits), query_mask, id_tuple
            )

        loss = total_loss(
            loss_visual,
            loss_textual,
            self.loss_weight_visual,
            self.loss_weight_textual,
        )
        return EpisodeForward(
            loss_visual=loss_visual,
            loss_textual=loss_textual,
            loss_total=loss,
            active_class_ids=id_tuple,
            visual_logits=visual_logits,
            textual_logits=textual_logits,
            bank_keys_used=keys_used,
        )

    @torch.no_grad()
    def predict_episode(
        self, episode: Episode, alpha: float = 0.5, keep_probabilities: bool = False
    ) -> SegmentationPrediction:
        """Segment the query image; never reads the query mask."""
        support_maps, support_masks, query_map, _ = self.encode_episode(episode)
        prototypes = self.episode_prototypes(
            support_maps, support_masks, episode.category.num_parts
        )
        class_ids = self.active_classes(prototypes)
        if not class_ids:
            raise ValueError(
                f"episode of category {episode.category.name!r} has no usable support pixels"
            )
        id_tuple = tuple(class_ids)
        visual_logits = correlate(
            query_map.data, prototypes.prototypes[class_ids], id_tuple, branch="visual"
        )
        textual_logits = None
        if self.design.uses_text_branch:
            text_protos, _ = self.textual_prototypes(
                episode.category, prototypes, class_ids, support_maps, training=False
            )
            textual_logits = correlate(
                query_map.data, text_protos, id_tuple, branch="textual"
            )
        image_shape = episode.query.mask.shape
        return predict_segmentation(
            visual_logits,
            textual_logits,
            alpha=alpha if self.design.uses_text_branch else 1.0,
            stride=query_map.stride,
            image_shape=image_shape,
            keep_probabilities=keep_probabilities,
        )

    def apply_ema_updates(self, keys: tuple[str, ...]) -> None:
        """Run the moving-average update for the keys one episode consumed."""
        if self.bank is None:
            return
        for key in keys:
            self.bank.ema_update(key)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def _seeded_init(module: nn.Module, generator: torch.Generator) -> None:
    import math

    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5), generator=generator)
            if layer.bias is not None:
                fan_in = nn.init._calculate_fan_in_and_fan_out(layer.weight)[0]
                bound = 1 / math.sqrt(fan_in) if fan_in > 0 else 0
                nn.init.uniform_(layer.bias, -bound, bound, generator=generator)
