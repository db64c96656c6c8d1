"""Encoder contracts: shapes, determinism, tokenizer scheme, gradient flow."""

import hashlib

import numpy as np
import pytest
import torch

from partprompt.determinism import parameter_fingerprint
from partprompt.encoders import (
    BLOCK_TEXT,
    TokenSequence,
    build_encoder_bundle,
    pad_to_stride,
    positional_pool_weights,
    tokenize_part_label,
)


@pytest.fixture(scope="module")
def bundle():
    return build_encoder_bundle(channels=16, token_dim=8, seed=3)


class TestEncodeImage:
    def test_shape_contract(self, bundle):
        image = torch.rand(3, 64, 64, dtype=torch.float64)
        fmap = bundle.encode_image(image)
        assert fmap.channels == 16
        assert fmap.spatial == (8, 8)
        assert fmap.stride == 8

    def test_odd_sizes_padded_up(self, bundle):
        image = torch.rand(3, 49, 70, dtype=torch.float64)
        fmap = bundle.encode_image(image)
        # ceil(49/8)=7, ceil(70/8)=9
        assert fmap.spatial == (7, 9)

    def test_eval_mode_deterministic(self, bundle):
        image = torch.rand(3, 32, 32, dtype=torch.float64)
        a = bundle.encode_image(image).data
        b = bundle.encode_image(image).data
        assert torch.equal(a, b)

    def test_non_finite_rejected(self, bundle):
        image = torch.full((3, 16, 16), float("nan"), dtype=torch.float64)
        with pytest.raises(ValueError, match="non-finite"):
            bundle.encode_image(image)

    def test_support_and_query_share_weights(self, bundle):
        """Same encoder object serves both paths; perturbing it moves both."""
        support = torch.rand(3, 32, 32, dtype=torch.float64)
        query = torch.rand(3, 32, 32, dtype=torch.float64)
        before = parameter_fingerprint(bundle.visual)
        out_s = bundle.encode_image(support).data.clone()
        out_q = bundle.encode_image(query).data.clone()
        assert parameter_fingerprint(bundle.visual) == before
        with torch.no_grad():
            first = next(bundle.visual.parameters())
            first.add_(0.05)
        try:
            assert not torch.equal(bundle.encode_image(support).data, out_s)
            assert not torch.equal(bundle.encode_image(query).data, out_q)
        finally:
            with torch.no_grad():
                first.sub_(0.05)

    def test_differentiable_wrt_input(self, bundle):
        image = torch.rand(3, 16, 16, dtype=torch.float64, requires_grad=True)
        out = bundle.encode_image(image)
        out.data.sum().backward()
        assert image.grad is not None
        assert torch.isfinite(image.grad).all()

    def test_padding_zero_fills(self):
        image = torch.ones(3, 5, 6, dtype=torch.float64)
        padded = pad_to_stride(image, 4)
        assert padded.shape == (3, 8, 8)
        assert torch.equal(padded[:, :5, :6], image)
        assert padded[:, 5:, :].abs().sum() == 0
        assert padded[:, :, 6:].abs().sum() == 0


class TestTokenizer:
    def test_deterministic(self):
        a = tokenize_part_label("body", n_text=3, token_dim=8)
        b = tokenize_part_label("body", n_text=3, token_dim=8)
        assert torch.equal(a.tokens, b.tokens)
        assert a.block_labels == (BLOCK_TEXT,) * 3

    def test_distinct_names_distinct_tokens(self):
        a = tokenize_part_label("body", n_text=3, token_dim=8)
        b = tokenize_part_label("head", n_text=3, token_dim=8)
        assert not torch.equal(a.tokens, b.tokens)

    def test_hash_scheme_recomputed_independently(self):
        """Recompute the documented scheme without calling the tokenizer."""
        name, n_text, dim = "body", 4, 8
        rows = []
        for i in range(n_text):
            digest = hashlib.blake2b(
                f"{name}\x1f{i}".encode("utf-8"), digest_size=8
            ).digest()
            seed = int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF
            rows.append(
                np.random.Generator(np.random.PCG64(seed)).standard_normal(dim)
            )
        expected = np.stack(rows)
        produced = tokenize_part_label(name, n_text=n_text, token_dim=dim)
        np.testing.assert_array_equal(produced.tokens.numpy(), expected)

    def test_overlong_name_truncates_with_warning(self):
        long_name = "x" * 200
        with pytest.warns(UserWarning, match="truncated"):
            tokens = tokenize_part_label(long_name, n_text=2, token_dim=4)
        truncated = tokenize_part_label("x" * 64, n_text=2, token_dim=4)
        assert torch.equal(tokens.tokens, truncated.tokens)

    def test_empty_name_rejected(self):
        with pytest.raises(ValueError):
            tokenize_part_label("", n_text=2, token_dim=4)


class TestTokenSequence:
    def test_block_order_enforced(self):
        tokens = torch.zeros(2, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match="block order"):
            TokenSequence(tokens=tokens, block_labels=("text", "specific"))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            TokenSequence(tokens=torch.zeros(0, 4), block_labels=())


class TestEncodeText:
    def test_output_dimension(self, bundle):
        prompt = tokenize_part_label("body", n_text=4, token_dim=8)
        out = bundle.encode_text(prompt)
        assert out.shape == (16,)

    def test_context_limit_no_silent_truncation(self):
        bundle = build_encoder_bundle(channels=8, token_dim=4, context_limit=6, seed=0)
        prompt = tokenize_part_label("body", n_text=7, token_dim=4)
        with pytest.raises(ValueError, match="context limit"):
            bundle.encode_text(prompt)

    def test_sensitive_to_single_token_change(self, bundle):
        """Finite-difference sensitivity of the embedding to one token entry."""
        base = tokenize_part_label("body", n_text=4, token_dim=8)
        out_a = bundle.encode_text(base)
        perturbed = base.tokens.clone()
        perturbed[1, 3] += 1e-3
        out_b = bundle.encode_text(
            TokenSequence(tokens=perturbed, block_labels=base.block_labels)
        )
        assert (out_b - out_a).abs().max() > 0

    def test_gradient_reaches_tokens_not_frozen_params(self, bundle):
        tokens = tokenize_part_label("body", n_text=4, token_dim=8).tokens.clone()
        tokens.requires_grad_(True)
        prompt = TokenSequence(tokens=tokens, block_labels=(BLOCK_TEXT,) * 4)
        bundle.encode_text(prompt).sum().backward()
        assert tokens.grad is not None and tokens.grad.abs().sum() > 0
        assert all(not p.requires_grad for p in bundle.text.parameters())

    def test_order_sensitivity_of_pooling(self, bundle):
        """Positional weights make the pooled embedding order-dependent."""
        tokens = tokenize_part_label("body", n_text=4, token_dim=8).tokens
        swapped = tokens.flip(0)
        a = bundle.encode_text(TokenSequence(tokens=tokens, block_labels=(BLOCK_TEXT,) * 4))
        b = bundle.encode_text(TokenSequence(tokens=swapped, block_labels=(BLOCK_TEXT,) * 4))
        assert not torch.allclose(a, b)

    def test_positional_weights_positive(self):
        weights = positional_pool_weights(100, torch.float64)
        assert (weights > 0).all()


class TestBundleConstruction:
    def test_unknown_arch_rejected(self):
        with pytest.raises(ValueError, match="unknown visual encoder"):
            build_encoder_bundle(visual_arch="resnet152")

    def test_same_seed_same_parameters(self):
        a = build_encoder_bundle(channels=8, token_dim=4, seed=5)
        b = build_encoder_bundle(channels=8, token_dim=4, seed=5)
        assert parameter_fingerprint(a) == parameter_fingerprint(b)

    def test_different_seed_different_parameters(self):
        a = build_encoder_bundle(channels=8, token_dim=4, seed=5)
        b = build_encoder_bundle(channels=8, token_dim=4, seed=6)
        assert parameter_fingerprint(a) != parameter_fingerprint(b)

    def test_frozen_text_has_no_trainable_params(self, bundle):
        frozen = [p for p in bundle.text.parameters() if p.requires_grad]
        assert frozen == []

    def test_unfrozen_text_trainable(self):
        bundle = build_encoder_bundle(channels=8, token_dim=4, text_frozen=False, seed=0)
        assert any(p.requires_grad for p in bundle.text.parameters())
