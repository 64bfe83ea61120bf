import math

import pytest
import torch
from torch.testing import assert_close

from src.components.vlm_core import (
    TextPromptHook,
    ToyDualEncoder,
    ToyTokenizer,
    VisualPromptPlan,
    build_handcrafted_prompts,
    class_distribution,
    compute_class_probabilities,
    encode_image,
    encode_text,
    pad_token_sequences,
)
from src.models.vlm import ClassSet, EncoderConfig, ModelRole
from src.utils.errors import (
    ConfigurationError,
    ContractViolation,
    DegenerateInputError,
    ShapeError,
    UnsupportedBackboneError,
)

from .conftest import TOY_CONFIG


def _unit_rows(generator: torch.Generator, rows: int, dim: int) -> torch.Tensor:
    x = torch.randn(rows, dim, generator=generator, dtype=torch.float64)
    return x / x.norm(dim=-1, keepdim=True)


class TestZeroShotHead:
    def test_fixed_two_class_case(self):
        image = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        texts = torch.tensor(
            [[0.2, math.sqrt(1 - 0.04), 0.0], [0.1, 0.0, math.sqrt(1 - 0.01)]],
            dtype=torch.float64,
        )
        probs = compute_class_probabilities(image, texts, 0.01)
        assert_close(
            probs,
            torch.tensor([0.9999546, 0.0000454], dtype=torch.float64),
            rtol=0,
            atol=1e-6,
        )

    def test_probabilities_are_normalized(self):
        generator = torch.Generator().manual_seed(3)
        for classes in (2, 7, 50):
            probs = compute_class_probabilities(
                _unit_rows(generator, 8, 16), _unit_rows(generator, classes, 16), 0.01
            )
            assert_close(
                probs.sum(dim=-1), torch.ones(8, dtype=torch.float64), rtol=0, atol=1e-6
            )
            assert (probs >= 0).all()

    def test_positive_scale_invariance(self):
        generator = torch.Generator().manual_seed(4)
        image = torch.randn(5, 16, generator=generator, dtype=torch.float64)
        texts = torch.randn(9, 16, generator=generator, dtype=torch.float64)
        reference = compute_class_probabilities(image, texts, 0.01)
        scaled = compute_class_probabilities(3.7 * image, 0.2 * texts, 0.01)
        assert_close(scaled, reference, rtol=0, atol=1e-9)

    def test_permutation_equivariance(self):
        generator = torch.Generator().manual_seed(5)
        image = torch.randn(4, 16, generator=generator, dtype=torch.float64)
        texts = torch.randn(6, 16, generator=generator, dtype=torch.float64)
        perm = torch.randperm(6, generator=generator)
        probs = compute_class_probabilities(image, texts, 0.01)
        permuted = compute_class_probabilities(image, texts[perm], 0.01)
        assert_close(permuted, probs[:, perm], rtol=0, atol=1e-15)
        assert torch.equal(permuted.argmax(dim=-1), perm.argsort()[probs.argmax(dim=-1)])

    def test_extreme_cosines_stay_finite(self):
        image = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        texts = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        probs = compute_class_probabilities(image, texts, 0.01)
        assert torch.isfinite(probs).all()
        assert probs[0, 0] > 0.999

    def test_accepts_a_list_of_text_embeddings(self):
        generator = torch.Generator().manual_seed(6)
        texts = _unit_rows(generator, 3, 8)
        image = _unit_rows(generator, 1, 8)[0]
        assert_close(
            compute_class_probabilities(image, list(texts), 0.5),
            compute_class_probabilities(image, texts, 0.5),
        )

    def test_contract_violations(self):
        image = torch.ones(4, dtype=torch.float64)
        texts = torch.eye(4, dtype=torch.float64)[:2]
        with pytest.raises(ContractViolation):
            compute_class_probabilities(image, texts, 0.0)
        with pytest.raises(ContractViolation):
            compute_class_probabilities(image, texts[:1], 0.01)
        with pytest.raises(DegenerateInputError):
            compute_class_probabilities(torch.zeros(4, dtype=torch.float64), texts, 0.01)

    def test_class_distribution_checks_the_class_count(self):
        texts = torch.eye(3, dtype=torch.float64)
        with pytest.raises(ShapeError):
            class_distribution(torch.ones(3, dtype=torch.float64), texts, ClassSet(("a", "b")), 0.01)
        with pytest.raises(ContractViolation):
            class_distribution(torch.ones(3, dtype=torch.float64), texts[:1], ClassSet(("a",)), 0.01)


class TestTokenizer:
    def test_ids_are_stable_and_never_padding(self):
        tokenizer = ToyTokenizer(64)
        ids = tokenizer.tokenize("A Photo of a CAT")
        assert ids == ToyTokenizer(64).tokenize("a photo of a cat")
        assert all(1 <= i < 64 for i in ids)
        assert ids[0] == ids[3]

    def test_vocab_must_leave_room_for_padding(self):
        with pytest.raises(ConfigurationError):
            ToyTokenizer(1)


class TestToyDualEncoder:
    def test_text_and_image_shapes(self, toy_student, class_set, images):
        prompts = build_handcrafted_prompts(toy_student, class_set, "a photo of a {}")
        assert encode_text(toy_student, prompts).shape == (class_set.size, 16)
        assert encode_text(toy_student, prompts[0]).shape == (16,)
        assert encode_image(toy_student, images).shape == (images.shape[0], 16)

    def test_padding_does_not_change_a_sequence(self, toy_student):
        short = toy_student.embed_text("a cat")
        long = toy_student.embed_text("a photo of a large cat")
        alone = encode_text(toy_student, short)
        batched = encode_text(toy_student, [short, long])[0]
        assert_close(batched, alone)

    def test_template_needs_one_placeholder(self, toy_student, class_set):
        with pytest.raises(ConfigurationError):
            build_handcrafted_prompts(toy_student, class_set, "a {} of a {}")

    def test_rejects_mismatched_inputs(self, toy_student):
        with pytest.raises(ShapeError):
            toy_student.encode_image(torch.zeros(2, 15, dtype=torch.float64))
        with pytest.raises(ShapeError):
            toy_student.encode_text(torch.zeros(1, 3, 8, dtype=torch.float64))
        with pytest.raises(ShapeError):
            toy_student.encode_text(torch.zeros(1, 40, 16, dtype=torch.float64))
        with pytest.raises(ContractViolation):
            pad_token_sequences([])

    def test_pixel_patchify(self):
        config = EncoderConfig(
            shared_dim=8, text_token_dim=8, patch_dim=8, num_layers=1,
            num_patches=4, num_heads=2, image_size=32, patch_size=16,
        )
        model = ToyDualEncoder(config)
        assert model.patchify(torch.zeros(2, 3, 32, 32)).shape == (2, 4, 3 * 16 * 16)
        assert model.encode_image(torch.rand(2, 3, 32, 32)).shape == (2, 8)

    def test_pixel_config_checks_patch_count(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(image_size=224, patch_size=32, num_patches=50)

    def test_teacher_is_frozen_and_stays_frozen(self, toy_teacher):
        assert toy_teacher.frozen
        assert not any(p.requires_grad for p in toy_teacher.parameters())
        toy_teacher.train()
        assert not toy_teacher.training
        with pytest.raises(ContractViolation):
            toy_teacher.unfreeze()

    def test_student_can_be_unfrozen(self, toy_student):
        toy_student.freeze()
        toy_student.unfreeze()
        assert all(p.requires_grad for p in toy_student.parameters())

    def test_zero_layer_text_encoder(self):
        config = EncoderConfig(
            shared_dim=8, text_token_dim=8, patch_dim=8, num_layers=0, num_heads=2,
            num_patches=1, input_kind="features", feature_dim=8,
        )
        model = ToyDualEncoder(config, ModelRole.STUDENT)
        assert encode_text(model, model.embed_text("a photo")).shape == (8,)

    def test_visual_prompts_need_a_vit(self):
        config = EncoderConfig(
            shared_dim=8, text_token_dim=8, patch_dim=8, num_layers=1, num_heads=2,
            num_patches=1, image_arch="mlp", input_kind="features", feature_dim=8,
        )
        model = ToyDualEncoder(config)
        plan = VisualPromptPlan(2, {0: torch.zeros(2, 8)})
        assert model.encode_image(torch.ones(3, 8)).shape == (3, 8)
        with pytest.raises(UnsupportedBackboneError):
            model.encode_image(torch.ones(3, 8), plan)

    def test_visual_and_text_prompts_change_features(self, toy_student, images):
        generator = torch.Generator().manual_seed(9)
        tokens = torch.randn(2, 3, 16, generator=generator, dtype=torch.float64)
        plain = toy_student.encode_image(images)
        prompted = toy_student.encode_image(images, VisualPromptPlan(3, {0: tokens[0], 1: tokens[1]}))
        assert prompted.shape == plain.shape
        assert not torch.allclose(prompted, plain)

        seq = toy_student.embed_text("a photo of a cat").embeddings.unsqueeze(0)
        hook = TextPromptHook(2, {1: torch.randn(2, 16, generator=generator, dtype=torch.float64)})
        assert not torch.allclose(
            toy_student.encode_text(seq, None, hook), toy_student.encode_text(seq)
        )

    def test_deep_visual_prompts_without_a_first_layer(self, toy_student, images):
        tokens = torch.ones(2, 16, dtype=torch.float64)
        out = toy_student.encode_image(images, VisualPromptPlan(2, {1: tokens}))
        assert out.shape == (images.shape[0], 16)

    def test_seeded_construction_is_reproducible(self):
        a = ToyDualEncoder(TOY_CONFIG, seed=5)
        b = ToyDualEncoder(TOY_CONFIG, seed=5)
        for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), name


class TestClassSetDigest:
    def test_order_matters(self):
        assert ClassSet(("cat", "dog")).digest != ClassSet(("dog", "cat")).digest

    def test_names_with_separators_do_not_collide(self):
        assert ClassSet(("a\nb", "c")).digest != ClassSet(("a", "b", "c")).digest
        assert ClassSet(("a,b", "c")).digest != ClassSet(("a", "b,c")).digest

    def test_equal_lists_share_a_digest(self):
        assert ClassSet(("cat", "dog")).digest == ClassSet.from_names(iter(["cat", "dog"])).digest
