"""Part-aware prompt construction.

Three token sources feed a part's prompt:

* part-specific tokens, produced from the part's visual prototype by a
  shallow shared network, so the prompt is conditioned on what the part
  actually looks like in the support image;
* part-shared tokens, one learnable bank entry per normalized part name
  (cross-category). The entry keeps a gradient-carrying current tensor and
  a gradient-free moving-average buffer updated once per optimizer step;
* fixed text tokens from the part label tokenizer.

During training the shared block mixes the detached buffer with the
current tokens (momentum-weighted) so the current tokens receive gradient
while the buffer only ever changes through its moving-average update;
evaluation consumes the buffer alone. An alternative "global" generator
produces one token block per episode from the image-level feature, shared
by every part, for the ablation grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .determinism import derive_seed
from .encoders import BLOCK_SHARED, BLOCK_SPECIFIC, TokenSequence
from .errors import ConfigurationError

BANK_INIT_STD = 0.02


class SpecificTokenGenerator(nn.Module):
    """Shallow map from a prototype vector (C,) to n_tokens prompt tokens.

    Two affine layers with a GELU between, hidden width 2C; one instance is
    shared across every part class and category.
    """

    def __init__(self, in_dim: int, n_tokens: int, token_dim: int):
        super().__init__()
        if n_tokens < 0:
            raise ValueError(f"n_tokens must be >= 0, got {n_tokens}")
        self.in_dim = in_dim
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        if n_tokens > 0:
            self.net = nn.Sequential(
                nn.Linear(in_dim, 2 * in_dim),
                nn.GELU(),
                nn.Linear(2 * in_dim, n_tokens * token_dim),
            )
        else:
            self.net = None

    def forward(self, prototype: torch.Tensor) -> torch.Tensor:
        if prototype.shape != (self.in_dim,):
            raise ValueError(
                f"prototype must be ({self.in_dim},), got {tuple(prototype.shape)}"
            )
        if self.n_tokens == 0:
            return prototype.new_zeros((0, self.token_dim))
        return self.net(prototype).reshape(self.n_tokens, self.token_dim)


def generate_specific_tokens(
    generator: SpecificTokenGenerator, prototype: torch.Tensor, present: bool = True
) -> torch.Tensor:
    """Part-specific token block for one part; the part must be present."""
    if not present:
        raise ValueError("cannot generate specific tokens for an absent prototype")
    if not torch.isfinite(prototype).all():
        raise ValueError("prototype contains non-finite values")
    return generator(prototype)


class SharedTokenBank(nn.Module):
    """Learnable shared tokens keyed by normalized part name, with EMA buffers.

    Each key owns ``current`` (a Parameter, shape n_tokens x token_dim) and
    an equally shaped moving-average buffer. Both start from the same
    Gaussian draw (std 0.02) seeded per key, so the initialization of one
    key never depends on how many other keys exist or their registration
    order. The buffer is written exclusively by :meth:`ema_update`.
    """

    def __init__(self, n_tokens: int, token_dim: int, momentum: float, seed: int = 0):
        super().__init__()
        if not (0.0 <= momentum <= 1.0):
            raise ConfigurationError(f"momentum must lie in [0, 1], got {momentum}")
        if n_tokens < 0:
            raise ValueError(f"n_tokens must be >= 0, got {n_tokens}")
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        self.momentum = momentum
        self.seed = seed
        self.current = nn.ParameterDict()
        self.update_counts: dict[str, int] = {}

    def keys(self) -> list[str]:
        return sorted(self.current.keys())

    def has(self, key: str) -> bool:
        return key in self.current

    def add_key(self, key: str) -> None:
        if self.has(key):
            return
        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.seed, f"bank:{key}"))
        init = (
            torch.randn(self.n_tokens, self.token_dim, generator=gen, dtype=torch.float64)
            * BANK_INIT_STD
        )
        self.current[key] = nn.Parameter(init.clone())
        self.register_buffer(f"ema_{key}", init.clone())
        self.update_counts[key] = 0

    def ensure_keys(self, keys) -> None:
        for key in keys:
            self.add_key(key)

    def _require(self, key: str) -> None:
        if not self.has(key):
            raise KeyError(f"unknown shared-token key {key!r}; known keys: {self.keys()}")

    def current_tokens(self, key: str) -> nn.Parameter:
        self._require(key)
        return self.current[key]

    def shared_tokens(self, key: str) -> torch.Tensor:
        self._require(key)
        return getattr(self, f"ema_{key}")

    @torch.no_grad()
    def ema_update(self, key: str) -> torch.Tensor:
        """buffer <- m * buffer + (1 - m) * current, from detached values."""
        self._require(key)
        buffer = getattr(self, f"ema_{key}")
        buffer.mul_(self.momentum).add_((1.0 - self.momentum) * self.current[key].detach())
        self.update_counts[key] += 1
        return buffer

    def training_tokens(self, key: str, training: bool) -> torch.Tensor:
        """Shared block consumed by the forward pass.

        Training mixes the detached buffer with the gradient-carrying
        current tokens: m * detach(buffer) + (1 - m) * current. Evaluation
        returns the buffer alone.
        """
        self._require(key)
        if not training:
            return self.shared_tokens(key)
        return (
            self.momentum * self.shared_tokens(key).detach()
            + (1.0 - self.momentum) * self.current[key]
        )

    def empty_block(self, dtype: torch.dtype) -> torch.Tensor:
        return torch.zeros((0, self.token_dim), dtype=dtype)


def compose_visual_tokens(
    specific: torch.Tensor, shared: torch.Tensor
) -> tuple[torch.Tensor, tuple[str, ...]]:
    """Concatenate the token blocks in (specific, shared) order."""
    if specific.ndim != 2 or shared.ndim != 2:
        raise ValueError("token blocks must be (n, token_dim) tensors")
    if specific.shape[0] and shared.shape[0] and specific.shape[1] != shared.shape[1]:
        raise ValueError(
            f"token dims differ: specific {specific.shape[1]} vs shared {shared.shape[1]}"
        )
    labels = (BLOCK_SPECIFIC,) * specific.shape[0] + (BLOCK_SHARED,) * shared.shape[0]
    if specific.shape[0] == 0:
        return shared, labels
    if shared.shape[0] == 0:
        return specific, labels
    return torch.cat([specific, shared], dim=0), labels


def assemble_prompt(
    visual_tokens: torch.Tensor,
    visual_labels: tuple[str, ...],
    text_block: TokenSequence,
    context_limit: int,
) -> TokenSequence:
    """Final prompt: visual tokens followed by the text block."""
    total = visual_tokens.shape[0] + len(text_block)
    if total > context_limit:
        raise ValueError(
            f"prompt of {visual_tokens.shape[0]} visual + {len(text_block)} text tokens "
            f"exceeds the context limit {context_limit}"
        )
    if visual_tokens.shape[0] == 0:
        return text_block
    tokens = torch.cat([visual_tokens, text_block.tokens.to(visual_tokens.dtype)], dim=0)
    return TokenSequence(tokens=tokens, block_labels=visual_labels + text_block.block_labels)


class GlobalTokenGenerator(nn.Module):
    """Episode-level token block from the spatially pooled image feature.

    Every part class in the episode reuses the same block; the network
    mirrors the specific-token generator.
    """

    def __init__(self, in_dim: int, n_tokens: int, token_dim: int):
        super().__init__()
        self.inner = SpecificTokenGenerator(in_dim, n_tokens, token_dim)

    def forward(self, global_feature: torch.Tensor) -> torch.Tensor:
        return self.inner(global_feature)


@dataclass(frozen=True)
class PromptDesign:
    """Which token sources are active for a given prompt-design name."""

    name: str
    uses_text_branch: bool
    uses_specific: bool
    uses_shared: bool
    uses_global: bool


_DESIGNS = {
    "protonet": PromptDesign("protonet", False, False, False, False),
    "lgp": PromptDesign("lgp", True, False, False, True),
    "lpp": PromptDesign("lpp", True, True, False, False),
    "ppl": PromptDesign("ppl", True, True, True, False),
}


def select_prompt_design(design: str) -> PromptDesign:
    """Resolve a design name.

    "protonet" disables the text branch entirely; "lgp" learns one global
    block per episode shared by all parts; "lpp" uses part-specific tokens
    only; "ppl" uses part-specific plus part-shared tokens.
    """
    try:
        return _DESIGNS[design]
    except KeyError:
        raise ValueError(f"unknown prompt design {design!r}, expected one of {sorted(_DESIGNS)}")
