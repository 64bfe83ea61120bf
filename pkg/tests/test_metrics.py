import pytest

from src.components.prompt_learners import build_prompt_learner
from src.components.student import PromptedStudent
from src.datasets.registry import FeatureSource
from src.evaluators.metrics import (
    AVERAGE_DATASET,
    HARMONIC_SPLIT,
    MEAN_SEED,
    accuracy_from_predictions,
    aggregate_rows,
    average_over_targets,
    evaluate_accuracy,
    harmonic_mean,
    round_half_up,
)
from src.models.experiment import DistillationConfig, MetricsRow, PromptConfig, PromptMethod
from src.utils.errors import ContractViolation


def _row(dataset: str, seed: str, split: str, accuracy: float | None) -> MetricsRow:
    return MetricsRow("cross_dataset", "CoOp+KDPL", "toy", dataset, seed, split, accuracy)


class TestReportedArithmetic:
    def test_domain_generalization_average(self):
        assert round_half_up(average_over_targets([55.37, 35.20, 23.27, 57.77])) == 42.90

    def test_cross_dataset_average(self):
        values = [84.60, 61.63, 13.77, 36.83, 22.33, 54.20, 75.03, 59.00, 87.67, 57.73]
        assert round_half_up(average_over_targets(values)) == 55.28

    @pytest.mark.parametrize(
        "base, new, expected", [(77.13, 60.82, 68.01), (73.66, 63.80, 68.38)]
    )
    def test_harmonic_mean(self, base, new, expected):
        assert round_half_up(harmonic_mean(base, new)) == expected


class TestRounding:
    @pytest.mark.parametrize(
        "value, expected",
        [(0.125, 0.13), (2.675, 2.68), (1.005, 1.01), (42.904, 42.9), (-0.125, -0.13)],
    )
    def test_half_up(self, value, expected):
        assert round_half_up(value) == expected

    def test_other_precision(self):
        assert round_half_up(1.25, 1) == 1.3


class TestAccuracy:
    def test_from_predictions(self):
        assert accuracy_from_predictions([0, 1, 1, 2], [0, 1, 2, 2]) == 75.0
        with pytest.raises(ContractViolation):
            accuracy_from_predictions([], [])
        with pytest.raises(ContractViolation):
            accuracy_from_predictions([0], [0, 1])

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            harmonic_mean(0.0, 50.0)
        with pytest.raises(ContractViolation):
            average_over_targets([])

    def test_planted_teacher_as_student_reproduces_its_accuracy(self, small_world):
        teacher = small_world.build_teacher()
        learner = build_prompt_learner(
            teacher, PromptConfig(method=PromptMethod.ZEROSHOT), student_template="a photo of {}"
        )
        student = PromptedStudent(teacher, learner, DistillationConfig())
        accuracy = evaluate_accuracy(
            student, small_world.source.test, FeatureSource(small_world), batch_size=7
        )
        assert accuracy == pytest.approx(small_world.teacher_accuracy)

    def test_class_set_must_match_the_split(self, small_world):
        student_model = small_world.build_student()
        learner = build_prompt_learner(student_model, PromptConfig(method=PromptMethod.ZEROSHOT))
        student = PromptedStudent(student_model, learner, DistillationConfig())
        split = small_world.source.test
        with pytest.raises(ContractViolation):
            evaluate_accuracy(
                student, split, FeatureSource(small_world), split.class_set.subset([1, 0])
            )


class TestAggregation:
    def test_seed_means_and_target_average(self):
        rows = [
            _row("src", "1", "test", 70.0),
            _row("src", "2", "test", 72.0),
            _row("a", "1", "test", 50.0),
            _row("a", "2", "test", 54.0),
            _row("b", "1", "test", 30.0),
            _row("b", "2", "test", 31.0),
        ]
        aggregates = {(r.dataset, r.split): r for r in aggregate_rows(rows, ["a", "b"])}
        assert aggregates[("src", "test")].accuracy == pytest.approx(71.0)
        assert aggregates[("src", "test")].seed == MEAN_SEED
        assert aggregates[(AVERAGE_DATASET, "test")].accuracy == pytest.approx(41.25)

    def test_missing_seed_makes_the_mean_missing(self):
        rows = [
            _row("a", "1", "test", 50.0),
            _row("a", "2", "test", None),
            _row("b", "1", "test", 30.0),
            _row("b", "2", "test", 32.0),
        ]
        aggregates = {(r.dataset, r.split): r for r in aggregate_rows(rows, ["a", "b"])}
        assert aggregates[("a", "test")].accuracy is None
        assert aggregates[(AVERAGE_DATASET, "test")].accuracy is None

    def test_harmonic_rows(self):
        rows = [_row("src", "1", "base", 77.13), _row("src", "1", "new", 60.82)]
        derived = [r for r in aggregate_rows(rows) if r.split == HARMONIC_SPLIT]
        assert len(derived) == 1
        assert round_half_up(derived[0].accuracy) == 68.01
