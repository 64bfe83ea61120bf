import math

import pytest
import torch

from src.components.prompt_learners import build_prompt_learner
from src.components.student import PromptedStudent
from src.components.trainer import PromptTrainer, seed_everything, warmup_cosine_factor
from src.components.vlm_core import ToyDualEncoder
from src.datasets.registry import Batch
from src.models.experiment import (
    DistillationConfig,
    Objective,
    PromptConfig,
    PromptMethod,
    TrainRunConfig,
)
from src.models.vlm import ClassVocabulary, ModelRole
from src.prompts.loader import TemplateLoader
from src.utils.errors import ContractViolation, TrainingDivergedError

from .conftest import TOY_CONFIG

EXTRA_NAMES = ("lamp", "chair", "river", "cloud")


def _trainer(
    objective: Objective,
    teacher=None,
    distill_config=None,
    method: PromptMethod = PromptMethod.COOP,
    vocabulary: ClassVocabulary | None = None,
    num_selected: int = 3,
    train_config: TrainRunConfig = TrainRunConfig(epochs=3, lr=0.01),
    **kwargs,
) -> PromptTrainer:
    distill_config = distill_config or DistillationConfig()
    encoder = ToyDualEncoder(TOY_CONFIG, ModelRole.STUDENT, seed=1, dtype=torch.float64)
    config = PromptConfig(method=method, depth=2)
    learner = build_prompt_learner(encoder, config, seed=1)
    return PromptTrainer(
        PromptedStudent(encoder, learner, distill_config),
        objective,
        train_config,
        distill_config,
        config,
        teacher=teacher,
        vocabulary=vocabulary,
        num_selected=num_selected,
        **kwargs,
    )


def _batches(images: torch.Tensor, labels: torch.Tensor | None) -> list[Batch]:
    ids = [f"img-{i}" for i in range(images.shape[0])]
    out = []
    for start in range(0, images.shape[0], 3):
        stop = start + 3
        out.append(
            Batch(
                images[start:stop],
                images[start:stop],
                ids[start:stop],
                None if labels is None else labels[start:stop],
            )
        )
    return out


class TestSchedule:
    def test_warmup_then_cosine(self):
        config = TrainRunConfig(epochs=10, lr=0.02, warmup_epochs=1, warmup_lr=1e-5)
        assert warmup_cosine_factor(0, config) == pytest.approx(1e-5 / 0.02)
        assert warmup_cosine_factor(1, config) == pytest.approx(1.0)
        assert warmup_cosine_factor(10, config) == pytest.approx(0.0, abs=1e-12)
        middle = warmup_cosine_factor(1 + 9 / 2, config)
        assert middle == pytest.approx(0.5 * (1 + math.cos(math.pi / 2)))

    def test_no_warmup(self):
        config = TrainRunConfig(epochs=4, lr=0.1, warmup_epochs=0)
        assert warmup_cosine_factor(0, config) == pytest.approx(1.0)

    def test_recorded_learning_rates(self, teacher, class_set, images):
        trainer = _trainer(Objective.KDPL, teacher, train_config=TrainRunConfig(epochs=3, lr=0.02))
        history = trainer.fit(_batches(images, None), class_set)
        assert history.learning_rates[0] == pytest.approx(1e-5)
        assert history.learning_rates[1] == pytest.approx(0.02)
        assert len(history.epoch_losses) == 3
        assert len(history.step_losses) == 6

    def test_seed_everything_is_repeatable(self):
        seed_everything(7)
        first = torch.rand(3)
        seed_everything(7)
        assert torch.equal(first, torch.rand(3))


class TestLabelIndependence:
    @pytest.mark.parametrize(
        "objective", [Objective.KDPL, Objective.CA_KDPL, Objective.CA_UPL_STAR], ids=str
    )
    def test_labels_never_reach_the_update(self, objective, teacher, class_set, images):
        vocabulary = ClassVocabulary.from_names((*class_set.names, *EXTRA_NAMES))
        true_labels = torch.arange(images.shape[0]) % class_set.size
        sentinel = torch.full((images.shape[0],), -999, dtype=torch.long)

        runs = []
        for labels in (true_labels, sentinel):
            trainer = _trainer(objective, teacher, vocabulary=vocabulary)
            history = trainer.fit(_batches(images, labels), class_set)
            runs.append((history.step_losses, trainer.learner.snapshot()))

        (losses_a, gamma_a), (losses_b, gamma_b) = runs
        assert losses_a == losses_b
        for key in gamma_a:
            assert torch.equal(gamma_a[key], gamma_b[key])


class TestObjectives:
    def test_kdpl_reduces_the_loss(self, teacher, class_set, images):
        trainer = _trainer(
            Objective.KDPL, teacher, train_config=TrainRunConfig(epochs=20, lr=5e-4)
        )
        history = trainer.fit(_batches(images, None), class_set)
        assert min(history.epoch_losses[1:]) < history.epoch_losses[0]

    def test_pseudo_labels_must_be_frozen_first(self, teacher, class_set, images):
        trainer = _trainer(Objective.UPL_STAR, teacher)
        batch = _batches(images, None)[0]
        with pytest.raises(ContractViolation):
            trainer.train_step(batch, class_set)
        ids = [f"img-{i}" for i in range(images.shape[0])]
        trainer.set_pseudo_labels(teacher.pseudo_labels(images, ids, class_set))
        assert math.isfinite(trainer.train_step(batch, class_set).loss)

    def test_plain_needs_labels(self, class_set, images):
        trainer = _trainer(Objective.PLAIN)
        with pytest.raises(ContractViolation):
            trainer.train_step(_batches(images, None)[0], class_set)
        labels = torch.arange(images.shape[0]) % class_set.size
        assert math.isfinite(trainer.train_step(_batches(images, labels)[0], class_set).loss)

    def test_random_supplement_selection_keeps_true_names(self, class_set, images):
        vocabulary = ClassVocabulary.from_names((*EXTRA_NAMES, *class_set.names))
        labels = torch.tensor([0, 1, 1, 2, 0, 2])
        trainer = _trainer(Objective.POMP_STAR, vocabulary=vocabulary, num_selected=5)
        trainer.fit(_batches(images, labels), class_set, epochs=1)
        assert len(trainer.selection_log) == 2
        for selection in trainer.selection_log:
            assert len(selection) == 5
        assert {"cat", "dog"} <= set(trainer.selection_log[0].names)

    def test_random_supplement_with_fewer_slots_than_classes(self, class_set, images):
        vocabulary = ClassVocabulary.from_names((*EXTRA_NAMES, *class_set.names))
        labels = torch.tensor([0, 1, 1, 2, 0, 2])
        trainer = _trainer(Objective.POMP_STAR, vocabulary=vocabulary, num_selected=1)
        history = trainer.fit(_batches(images, labels), class_set, epochs=1)
        assert all(len(selection) == 1 for selection in trainer.selection_log)
        assert all(math.isfinite(loss) for loss in history.epoch_losses)

    def test_class_agnostic_step_logs_selections(self, teacher, class_set, images):
        vocabulary = ClassVocabulary.from_names((*class_set.names, *EXTRA_NAMES))
        trainer = _trainer(Objective.CA_KDPL, teacher, vocabulary=vocabulary, num_selected=4)
        result = trainer.ca_train_step(_batches(images, None)[0])
        assert len(result.selection) == 4
        assert trainer.selection_log == [result.selection]

        plain = _trainer(Objective.KDPL, teacher)
        with pytest.raises(ContractViolation):
            plain.ca_train_step(_batches(images, None)[0])

    def test_promptsrc_aggregates_epoch_snapshots(self, teacher, class_set, images):
        trainer = _trainer(
            Objective.KDPL,
            teacher,
            method=PromptMethod.PROMPTSRC,
            template_bank=TemplateLoader().bank,
        )
        history = trainer.fit(_batches(images, None), class_set)
        assert len(history.epoch_losses) == 3
        assert math.isfinite(trainer.learner.norm())


class TestContracts:
    def test_missing_collaborators(self, teacher):
        with pytest.raises(ContractViolation):
            _trainer(Objective.KDPL)
        with pytest.raises(ContractViolation):
            _trainer(Objective.CA_KDPL, teacher)
        with pytest.raises(ContractViolation):
            _trainer(Objective.KDPL, teacher, method=PromptMethod.PROMPTSRC)
        with pytest.raises(ContractViolation):
            _trainer(Objective.KDPL, teacher, method=PromptMethod.ZEROSHOT)

    def test_single_writer(self, teacher, class_set, images):
        trainer = _trainer(Objective.KDPL, teacher)
        trainer._lock.acquire()
        try:
            with pytest.raises(ContractViolation):
                trainer.train_step(_batches(images, None)[0], class_set)
        finally:
            trainer._lock.release()

    def test_divergence_is_reported(self, class_set, images):
        trainer = _trainer(Objective.PLAIN)
        poisoned = images.clone()
        poisoned[0, 0] = float("nan")
        labels = torch.zeros(images.shape[0], dtype=torch.long)
        with pytest.raises(TrainingDivergedError) as info:
            trainer.train_step(_batches(poisoned, labels)[0], class_set)
        assert info.value.batch_ids == ["img-0", "img-1", "img-2"]

    def test_empty_loader(self, teacher, class_set):
        trainer = _trainer(Objective.KDPL, teacher)
        with pytest.raises(ContractViolation):
            trainer.fit([], class_set)
