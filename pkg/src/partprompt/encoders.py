"""Visual and text encoder contracts plus the desk-scale implementations.

The visual encoder maps an image to a dense feature grid (channels x H x W
at a fixed stride); the text encoder maps a token sequence to a single
vector whose dimension equals the visual channel count, so the two spaces
can be correlated directly. Support and query images always go through the
same encoder instance (shared weights).

External pre-trained backbones plug in through the registries at the
bottom of this module: anything satisfying the same contracts works.
Weight loading/downloading for such adapters is out of scope.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .validation import check_finite

BLOCK_SPECIFIC = "specific"
BLOCK_SHARED = "shared"
BLOCK_TEXT = "text"
_BLOCK_ORDER = (BLOCK_SPECIFIC, BLOCK_SHARED, BLOCK_TEXT)

MAX_PART_NAME_CHARS = 64


@dataclass(frozen=True)
class FeatureMap:
    """Dense visual features of shape (C, H, W) with the producing stride."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class TokenSequence:
    """Ordered prompt tokens (L, D_tok) with a parallel block label per token.

    Valid block order is specific* shared* text* and the sequence must be
    nonempty.
    """

    tokens: torch.Tensor
    block_labels: tuple[str, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] == 0:
            raise ValueError(
                f"tokens must be a nonempty (L, D_tok) tensor, got {tuple(self.tokens.shape)}"
            )
        if len(self.block_labels) != self.tokens.shape[0]:
            raise ValueError("block_labels length must match token count")
        ranks = [_BLOCK_ORDER.index(label) for label in self.block_labels]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            raise ValueError(
                f"block order must be specific* shared* text*, got {self.block_labels}"
            )

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


def pad_to_stride(image: torch.Tensor, stride: int) -> torch.Tensor:
    """Right/bottom zero-pad (3, H, W) so both spatial dims divide the stride."""
    h, w = image.shape[-2:]
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h == 0 and pad_w == 0:
        return image
    return torch.nn.functional.pad(image, (0, pad_w, 0, pad_h))


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvFeatureEncoder(nn.Module):
    """Small trainable convolutional encoder: stride 8, configurable width.

    Three stride-2 stages with group normalization; runs comfortably on CPU
    at desk scale and is the default stand-in for a large pre-trained
    backbone.
    """

    def __init__(self, channels: int = 64, stride: int = 8):
        super().__init__()
        if stride != 8:
            raise ValueError("ConvFeatureEncoder is a fixed stride-8 architecture")
        mid = max(8, channels // 2)
        self.stride = stride
        self.out_channels = channels
        self.stages = nn.Sequential(
            nn.Conv2d(3, mid, kernel_size=3, stride=2, padding=1),
            _group_norm(mid),
            nn.GELU(),
            nn.Conv2d(mid, channels, kernel_size=3, stride=2, padding=1),
            _group_norm(channels),
            nn.GELU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.stages(image.unsqueeze(0)).squeeze(0)


def tokenize_part_label(
    name: str,
    n_text: int = 4,
    token_dim: int = 32,
    dtype: torch.dtype = torch.float64,
) -> TokenSequence:
    """Deterministic hash-seeded token block for a part label (text block only).

    Scheme, reproducible without this function: for token slot ``i`` of
    ``name`` (after truncation to MAX_PART_NAME_CHARS characters), the seed
    is the little-endian integer of ``blake2b(f"{name}\\x1f{i}", digest_size=8)``
    masked to 63 bits, and the token vector is
    ``np.random.Generator(np.random.PCG64(seed)).standard_normal(token_dim)``.

    The same name always yields the same tokens; distinct part names give
    distinct tokens with probability 1.
    """
    if not name:
        raise ValueError("part label must be nonempty")
    if len(name) > MAX_PART_NAME_CHARS:
        warnings.warn(
            f"part label of {len(name)} chars truncated to {MAX_PART_NAME_CHARS}",
            stacklevel=2,
        )
        name = name[:MAX_PART_NAME_CHARS]
    rows = []
    for i in range(n_text):
        digest = hashlib.blake2b(f"{name}\x1f{i}".encode("utf-8"), digest_size=8).digest()
        seed = int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF
        rng = np.random.Generator(np.random.PCG64(seed))
        rows.append(rng.standard_normal(token_dim))
    tokens = torch.as_tensor(np.stack(rows), dtype=dtype)
    return TokenSequence(tokens=tokens, block_labels=(BLOCK_TEXT,) * n_text)


def positional_pool_weights(length: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed positionally varying pooling weights: w_i = 1 + 0.5 cos(0.7 i).

    Makes the pooled representation order-sensitive without introducing
    trainable state; weights are positive for all i.
    """
    idx = torch.arange(length, dtype=dtype)
    return 1.0 + 0.5 * torch.cos(0.7 * idx)


class StubTextEncoder(nn.Module):
    """Deterministic differentiable text encoder for desk-scale runs.

    Position-weighted mean over the prompt tokens followed by a two-layer
    projection to the visual channel dimension. Gradients flow into the
    prompt tokens; the projection weights themselves are the "text encoder
    parameters" that stay frozen during training.
    """

    def __init__(self, token_dim: int, out_dim: int, context_limit: int = 77):
        super().__init__()
        self.token_dim = token_dim
        self.out_dim = out_dim
        self.context_limit = context_limit
        hidden = 2 * token_dim
        self.proj = nn.Sequential(
            nn.Linear(token_dim, hidden),
            nn.Tanh(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, prompt: TokenSequence) -> torch.Tensor:
        if len(prompt) > self.context_limit:
            raise ValueError(
                f"prompt of {len(prompt)} tokens exceeds context limit {self.context_limit}"
            )
        if prompt.token_dim != self.token_dim:
            raise ValueError(
                f"prompt token dim {prompt.token_dim} != encoder token dim {self.token_dim}"
            )
        weights = positional_pool_weights(len(prompt), prompt.tokens.dtype)
        pooled = (prompt.tokens * weights[:, None]).sum(dim=0) / weights.sum()
        return self.proj(pooled)


class EncoderBundle(nn.Module):
    """One visual + one text encoder with a shared channel space.

    The same visual encoder instance embeds support and query images. When
    the visual encoder's native channel count differs from the text
    embedding dimension (external adapters), a trainable 1x1 channel
    alignment maps visual features into the text dimension; the desk
    encoder needs none. With ``text_frozen`` (the default training setup)
    the text encoder parameters take no gradient and stay bit-identical
    across training steps.
    """

    def __init__(self, visual: nn.Module, text: StubTextEncoder, text_frozen: bool = True):
        super().__init__()
        self.visual = visual
        self.text = text
        self.text_frozen = text_frozen
        if visual.out_channels != text.out_dim:
            self.align = nn.Conv2d(visual.out_channels, text.out_dim, kernel_size=1)
        else:
            self.align = None
        if text_frozen:
            for param in self.text.parameters():
                param.requires_grad_(False)

    @property
    def channels(self) -> int:
        return self.text.out_dim

    @property
    def stride(self) -> int:
        return self.visual.stride

    def encode_image(self, image) -> FeatureMap:
        """Embed one (3, H, W) image into a FeatureMap.

        Accepts a torch tensor (kept differentiable) or a numpy array.
        Non-finite inputs are rejected.
        """
        if not isinstance(image, torch.Tensor):
            image = torch.as_tensor(
                np.asarray(image), dtype=next(self.visual.parameters()).dtype
            )
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {tuple(image.shape)}")
        check_finite(image, "image")
        padded = pad_to_stride(image, self.stride)
        features = self.visual(padded)
        if self.align is not None:
            features = self.align(features.unsqueeze(0)).squeeze(0)
        return FeatureMap(data=features, stride=self.stride)

    def encode_text(self, prompt: TokenSequence) -> torch.Tensor:
        """Embed an assembled prompt into the shared channel space."""
        return self.text(prompt)


VISUAL_ENCODERS = {
    "desk_conv8": lambda channels, stride: ConvFeatureEncoder(channels, stride),
}

TEXT_ENCODERS = {
    "hash_stub": lambda token_dim, out_dim, context_limit: StubTextEncoder(
        token_dim, out_dim, context_limit
    ),
}


def register_visual_encoder(key: str, builder) -> None:
    VISUAL_ENCODERS[key] = builder


def register_text_encoder(key: str, builder) -> None:
    TEXT_ENCODERS[key] = builder


def build_encoder_bundle(
    visual_arch: str = "desk_conv8",
    text_arch: str = "hash_stub",
    channels: int = 64,
    stride: int = 8,
    token_dim: int = 32,
    context_limit: int = 77,
    text_frozen: bool = True,
    dtype: torch.dtype = torch.float64,
    seed: int = 0,
) -> EncoderBundle:
    """Construct a bundle from registry keys with seeded initialization."""
    from .determinism import generator_for

    if visual_arch not in VISUAL_ENCODERS:
        raise ValueError(f"unknown visual encoder {visual_arch!r}, have {sorted(VISUAL_ENCODERS)}")
    if text_arch not in TEXT_ENCODERS:
        raise ValueError(f"unknown text encoder {text_arch!r}, have {sorted(TEXT_ENCODERS)}")

    visual = VISUAL_ENCODERS[visual_arch](channels, stride)
    text = TEXT_ENCODERS[text_arch](token_dim, channels, context_limit)
    _reinitialize(visual, generator_for(seed, "visual_encoder"))
    _reinitialize(text, generator_for(seed, "text_encoder"))
    bundle = EncoderBundle(visual=visual, text=text, text_frozen=text_frozen)
    if bundle.align is not None:
        _reinitialize(bundle.align, generator_for(seed, "visual_align"))
    return bundle.to(dtype)


def _reinitialize(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded Kaiming-uniform init for every conv/linear in ``module``."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(layer.weight, a=math.sqrt(5), generator=generator)
            if layer.bias is not None:
                fan_in = nn.init._calculate_fan_in_and_fan_out(layer.weight)[0]
                bound = 1 / math.sqrt(fan_in) if fan_in > 0 else 0
                nn.init.uniform_(layer.bias, -bound, bound, generator=generator)
