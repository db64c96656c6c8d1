"""Prompt construction: shared-token bank semantics and token assembly."""

import numpy as np
import pytest
import torch

from partprompt.encoders import BLOCK_SHARED, BLOCK_SPECIFIC, BLOCK_TEXT, tokenize_part_label
from partprompt.prompts import (
    GlobalTokenGenerator,
    SharedTokenBank,
    SpecificTokenGenerator,
    assemble_prompt,
    compose_visual_tokens,
    generate_specific_tokens,
    select_prompt_design,
)


def make_bank(momentum, n_tokens=3, token_dim=4, keys=("body",), seed=0):
    bank = SharedTokenBank(n_tokens=n_tokens, token_dim=token_dim, momentum=momentum, seed=seed)
    bank.ensure_keys(keys)
    return bank


class TestEmaUpdate:
    def test_momentum_zero_copies_current(self):
        bank = make_bank(momentum=0.0)
        with torch.no_grad():
            bank.current["body"].add_(1.0)
        bank.ema_update("body")
        assert torch.equal(bank.shared_tokens("body"), bank.current["body"])

    def test_momentum_one_freezes_buffer(self):
        bank = make_bank(momentum=1.0)
        before = bank.shared_tokens("body").clone()
        with torch.no_grad():
            bank.current["body"].mul_(5.0).add_(2.0)
        bank.ema_update("body")
        assert torch.equal(bank.shared_tokens("body"), before)

    @pytest.mark.parametrize("momentum", [0.0, 0.5, 0.9, 0.99])
    def test_closed_form_constant_current(self, momentum):
        """t updates with constant current: buffer = m^t v0 + (1 - m^t) v_cur."""
        bank = make_bank(momentum=momentum, n_tokens=2, token_dim=5)
        v0 = bank.shared_tokens("body").clone()
        with torch.no_grad():
            bank.current["body"].copy_(torch.linspace(-1, 1, 10).reshape(2, 5))
        v_cur = bank.current["body"].detach().clone()
        for t in (1, 7, 50, 200):
            bank = make_bank(momentum=momentum, n_tokens=2, token_dim=5)
            with torch.no_grad():
                bank.current["body"].copy_(v_cur)
            for _ in range(t):
                bank.ema_update("body")
            expected = momentum**t * v0 + (1 - momentum**t) * v_cur
            assert (bank.shared_tokens("body") - expected).abs().max() <= 1e-10

    def test_replay_of_recorded_trajectory_is_exact(self):
        """The buffer equals the recurrence applied to the recorded currents."""
        momentum = 0.9
        bank = make_bank(momentum=momentum, n_tokens=2, token_dim=3)
        replay = bank.shared_tokens("body").clone()
        rng = np.random.default_rng(0)
        for _ in range(25):
            with torch.no_grad():
                bank.current["body"].add_(
                    torch.as_tensor(rng.standard_normal((2, 3))) * 0.1
                )
            recorded = bank.current["body"].detach().clone()
            bank.ema_update("body")
            replay = momentum * replay + (1 - momentum) * recorded
        assert torch.equal(bank.shared_tokens("body"), replay)

    def test_unknown_key(self):
        bank = make_bank(momentum=0.5)
        with pytest.raises(KeyError):
            bank.ema_update("tentacle")

    def test_current_untouched_by_update(self):
        bank = make_bank(momentum=0.5)
        before = bank.current["body"].detach().clone()
        bank.ema_update("body")
        assert torch.equal(bank.current["body"].detach(), before)

    def test_update_counts_tracked(self):
        bank = make_bank(momentum=0.5)
        bank.ema_update("body")
        bank.ema_update("body")
        assert bank.update_counts["body"] == 2


class TestTrainingTokens:
    def test_momentum_zero_training_returns_current_exactly(self):
        bank = make_bank(momentum=0.0)
        out = bank.training_tokens("body", training=True)
        assert torch.equal(out, bank.current["body"])
        assert out.requires_grad

    def test_eval_returns_buffer_regardless_of_current(self):
        bank = make_bank(momentum=0.7)
        with torch.no_grad():
            bank.current["body"].mul_(100.0)
        out = bank.training_tokens("body", training=False)
        assert torch.equal(out, bank.shared_tokens("body"))

    @pytest.mark.parametrize("momentum", [0.0, 0.5, 0.99])
    def test_gradient_chain_rule(self, momentum):
        """d(loss)/d(current) is (1 - m) times d(loss)/d(block); buffer gets none."""
        bank = make_bank(momentum=momentum, n_tokens=2, token_dim=3)
        block = bank.training_tokens("body", training=True)
        weights = torch.linspace(1.0, 2.0, 6).reshape(2, 3)
        loss = (block * weights).sum()
        loss.backward()
        expected = (1 - momentum) * weights
        assert torch.allclose(bank.current["body"].grad, expected)
        assert not bank.shared_tokens("body").requires_grad

    def test_buffer_never_written_by_gradients(self):
        bank = make_bank(momentum=0.5)
        before = bank.shared_tokens("body").clone()
        block = bank.training_tokens("body", training=True)
        block.sum().backward()
        with torch.no_grad():
            bank.current["body"].sub_(0.1 * bank.current["body"].grad)
        assert torch.equal(bank.shared_tokens("body"), before)


class TestBankSemantics:
    def test_shared_key_is_cross_category(self):
        """Two categories naming "body" read and write one bank entry."""
        bank = make_bank(momentum=0.0, keys=("body", "wing"))
        with torch.no_grad():
            bank.current["body"].fill_(3.0)
        bank.ema_update("body")  # an episode of category A updates "body"
        seen_by_b = bank.training_tokens("body", training=False)
        assert (seen_by_b == 3.0).all()

    def test_key_init_independent_of_registration_order(self):
        a = SharedTokenBank(n_tokens=2, token_dim=4, momentum=0.5, seed=1)
        a.ensure_keys(["body", "wing"])
        b = SharedTokenBank(n_tokens=2, token_dim=4, momentum=0.5, seed=1)
        b.ensure_keys(["wing", "body"])
        assert torch.equal(a.current["body"].detach(), b.current["body"].detach())
        assert torch.equal(a.current["wing"].detach(), b.current["wing"].detach())

    def test_init_copies_into_both(self):
        bank = make_bank(momentum=0.5)
        assert torch.equal(bank.current["body"].detach(), bank.shared_tokens("body"))

    def test_bad_momentum_rejected(self):
        from partprompt.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            SharedTokenBank(n_tokens=2, token_dim=4, momentum=1.5)


class TestSpecificTokens:
    def test_shapes(self):
        gen = SpecificTokenGenerator(in_dim=6, n_tokens=3, token_dim=5)
        out = gen(torch.rand(6, dtype=torch.float64))
        assert out.shape == (3, 5)

    def test_zero_tokens_config(self):
        gen = SpecificTokenGenerator(in_dim=6, n_tokens=0, token_dim=5)
        out = gen(torch.rand(6, dtype=torch.float64))
        assert out.shape == (0, 5)

    def test_identical_prototypes_identical_blocks(self):
        gen = SpecificTokenGenerator(in_dim=4, n_tokens=2, token_dim=3).double()
        v = torch.rand(4, dtype=torch.float64)
        assert torch.equal(gen(v.clone()), gen(v.clone()))

    def test_absent_prototype_rejected(self):
        gen = SpecificTokenGenerator(in_dim=4, n_tokens=2, token_dim=3)
        with pytest.raises(ValueError, match="absent"):
            generate_specific_tokens(gen, torch.rand(4), present=False)

    def test_gradient_matches_finite_differences(self):
        gen = SpecificTokenGenerator(in_dim=5, n_tokens=2, token_dim=3).double()
        prototype = torch.rand(5, dtype=torch.float64, requires_grad=True)
        weights = torch.rand(2, 3, dtype=torch.float64)
        (gen(prototype) * weights).sum().backward()
        eps = 1e-6
        for i in range(5):
            plus = prototype.detach().clone()
            plus[i] += eps
            minus = prototype.detach().clone()
            minus[i] -= eps
            with torch.no_grad():
                fd = ((gen(plus) * weights).sum() - (gen(minus) * weights).sum()) / (2 * eps)
            rel = abs(float(fd) - float(prototype.grad[i])) / max(1.0, abs(float(fd)))
            assert rel <= 1e-4


class TestComposeAndAssemble:
    def test_concatenation_order_and_length(self):
        specific = torch.ones(2, 4, dtype=torch.float64)
        shared = torch.full((3, 4), 2.0, dtype=torch.float64)
        tokens, labels = compose_visual_tokens(specific, shared)
        assert tokens.shape == (5, 4)
        assert labels == (BLOCK_SPECIFIC,) * 2 + (BLOCK_SHARED,) * 3
        assert (tokens[:2] == 1).all() and (tokens[2:] == 2).all()

    def test_empty_shared_degenerates_to_specific(self):
        specific = torch.ones(2, 4, dtype=torch.float64)
        tokens, labels = compose_visual_tokens(specific, torch.zeros(0, 4))
        assert torch.equal(tokens, specific)
        assert labels == (BLOCK_SPECIFIC,) * 2

    def test_empty_specific_degenerates_to_shared(self):
        shared = torch.ones(3, 4, dtype=torch.float64)
        tokens, labels = compose_visual_tokens(torch.zeros(0, 4), shared)
        assert torch.equal(tokens, shared)
        assert labels == (BLOCK_SHARED,) * 3

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dims differ"):
            compose_visual_tokens(torch.zeros(2, 4), torch.zeros(1, 5))

    def test_assembled_block_labels(self):
        visual, labels = compose_visual_tokens(
            torch.rand(2, 4, dtype=torch.float64), torch.rand(3, 4, dtype=torch.float64)
        )
        text = tokenize_part_label("body", n_text=4, token_dim=4)
        prompt = assemble_prompt(visual, labels, text, context_limit=77)
        assert len(prompt) == 9
        assert prompt.block_labels == (
            (BLOCK_SPECIFIC,) * 2 + (BLOCK_SHARED,) * 3 + (BLOCK_TEXT,) * 4
        )

    def test_empty_visual_gives_text_only_prompt(self):
        text = tokenize_part_label("body", n_text=3, token_dim=4)
        prompt = assemble_prompt(torch.zeros(0, 4), (), text, context_limit=77)
        assert torch.equal(prompt.tokens, text.tokens)
        assert prompt.block_labels == (BLOCK_TEXT,) * 3

    def test_context_overflow_reports_lengths(self):
        text = tokenize_part_label("body", n_text=4, token_dim=4)
        visual, labels = compose_visual_tokens(
            torch.rand(5, 4, dtype=torch.float64), torch.rand(5, 4, dtype=torch.float64)
        )
        with pytest.raises(ValueError, match="10 visual .* 4 text"):
            assemble_prompt(visual, labels, text, context_limit=12)


class TestGlobalTokens:
    def test_block_length_matches_config(self):
        gen = GlobalTokenGenerator(in_dim=6, n_tokens=5, token_dim=3).double()
        out = gen(torch.rand(6, dtype=torch.float64))
        assert out.shape == (5, 3)

    def test_different_images_different_blocks(self):
        gen = GlobalTokenGenerator(in_dim=6, n_tokens=2, token_dim=3).double()
        a = gen(torch.rand(6, dtype=torch.float64))
        b = gen(torch.rand(6, dtype=torch.float64) + 1.0)
        assert not torch.allclose(a, b)


class TestSelectPromptDesign:
    def test_known_designs(self):
        ppl = select_prompt_design("ppl")
        assert ppl.uses_specific and ppl.uses_shared and ppl.uses_text_branch
        lpp = select_prompt_design("lpp")
        assert lpp.uses_specific and not lpp.uses_shared
        lgp = select_prompt_design("lgp")
        assert lgp.uses_global and not lgp.uses_specific
        protonet = select_prompt_design("protonet")
        assert not protonet.uses_text_branch

    def test_unknown_design(self):
        with pytest.raises(ValueError, match="unknown prompt design"):
            select_prompt_design("fancy")
