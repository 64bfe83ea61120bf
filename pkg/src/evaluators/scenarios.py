"""Evaluation scenarios: what a prompt is trained on and where it is tested."""

from abc import ABC, abstractmethod
from collections.abc import Callable

from loguru import logger

from ..components.student import PromptedStudent
from ..datasets.registry import DatasetProvider
from ..datasets.splits import base_novel_split
from ..models.data import DatasetSplit, DatasetSplits
from ..models.experiment import MetricsRow, MetricsTable, ScenarioKind, ScenarioSpec
from ..models.vlm import ClassSet
from ..utils.errors import DataError
from ..utils.logger import log_run_event
from .metrics import aggregate_rows, evaluate_accuracy


class ScenarioEvaluator(ABC):
    """Base class for all scenario evaluators."""

    def __init__(
        self, spec: ScenarioSpec, provider: DatasetProvider, batch_size: int = 256
    ) -> None:
        self.spec = spec
        self.provider = provider
        self.batch_size = batch_size
        self._source: DatasetSplits | None = None

    @property
    def source(self) -> DatasetSplits:
        if self._source is None:
            self._source = self.provider.load(self.spec.source)
        return self._source

    def training_classes(self) -> ClassSet:
        """Class names the prompt may see during training."""
        return self.source.class_set

    def training_split(self) -> DatasetSplit:
        return self.source.train

    @property
    def average_targets(self) -> list[str]:
        """Datasets whose test accuracies form the reported target average."""
        return []

    @abstractmethod
    def evaluation_splits(self) -> list[tuple[str, str]]:
        """(dataset, split label) pairs this scenario reports."""
        ...

    def resolve(self, dataset: str, split: str) -> DatasetSplit:
        splits = self.source if dataset == self.spec.source else self.provider.load(dataset)
        return splits.test

    def evaluate(
        self, student: PromptedStudent, method: str, backbone: str, seed: int
    ) -> list[MetricsRow]:
        """One row per reported (dataset, split); missing data gives an NA row."""
        rows = []
        for dataset, split in self.evaluation_splits():
            try:
                test = self.resolve(dataset, split)
                if len(test) == 0:
                    raise DataError("Empty test split", dataset)
                accuracy = evaluate_accuracy(
                    student,
                    test,
                    self.provider.source(dataset),
                    batch_size=self.batch_size,
                )
            except DataError as e:
                logger.warning(f"Skipping {dataset}/{split} for seed {seed}: {e}")
                accuracy = None
            rows.append(
                MetricsRow(
                    self.spec.kind.value, method, backbone, dataset, str(seed), split, accuracy
                )
            )
            if accuracy is not None:
                logger.info(f"{method} seed {seed} {dataset}/{split}: {accuracy:.2f}%")
        return rows


class TransferEvaluator(ScenarioEvaluator):
    """Source test split followed by every target's test split."""

    @property
    def average_targets(self) -> list[str]:
        return [t for t in self.spec.targets if t != self.spec.source]

    def evaluation_splits(self) -> list[tuple[str, str]]:
        return [(self.spec.source, "test"), *((t, "test") for t in self.average_targets)]


class DomainGeneralizationEvaluator(TransferEvaluator):
    """Same classes as the source, shifted input distribution."""


class CrossDatasetEvaluator(TransferEvaluator):
    """Unseen datasets with their own class names."""


class ClassAgnosticEvaluator(TransferEvaluator):
    """Transfer protocol for prompts trained without the source's class names."""


class BaseToNovelEvaluator(ScenarioEvaluator):
    """Train on the first half of the classes; test base and novel halves separately."""

    def __init__(self, spec, provider, batch_size=256) -> None:
        super().__init__(spec, provider, batch_size)
        self._halves: tuple[ClassSet, ClassSet] | None = None

    @property
    def halves(self) -> tuple[ClassSet, ClassSet]:
        if self._halves is None:
            self._halves = base_novel_split(self.source.classnames)
        return self._halves

    def training_classes(self) -> ClassSet:
        return self.halves[0]

    def training_split(self) -> DatasetSplit:
        return self.source.train.restricted_to(self.halves[0])

    def evaluation_splits(self) -> list[tuple[str, str]]:
        return [(self.spec.source, "base"), (self.spec.source, "new")]

    def resolve(self, dataset: str, split: str) -> DatasetSplit:
        base, novel = self.halves
        return self.source.test.restricted_to(base if split == "base" else novel)


EVALUATORS: dict[ScenarioKind, type[ScenarioEvaluator]] = {
    ScenarioKind.DOMAIN_GENERALIZATION: DomainGeneralizationEvaluator,
    ScenarioKind.CROSS_DATASET: CrossDatasetEvaluator,
    ScenarioKind.BASE_TO_NOVEL: BaseToNovelEvaluator,
    ScenarioKind.CLASS_AGNOSTIC: ClassAgnosticEvaluator,
}


def build_scenario_evaluator(
    spec: ScenarioSpec, provider: DatasetProvider, batch_size: int = 256
) -> ScenarioEvaluator:
    return EVALUATORS[spec.kind](spec, provider, batch_size)


def run_scenario(
    spec: ScenarioSpec,
    provider: DatasetProvider,
    train_for_seed: Callable[[int, ScenarioEvaluator], PromptedStudent],
    method: str,
    backbone: str,
    batch_size: int = 256,
) -> MetricsTable:
    """
    Train one prompt per seed, evaluate it on every reported split, aggregate.

    Args:
        train_for_seed: Returns the trained student for a seed; it reads the
            training split and class names through the evaluator it is given
    """
    evaluator = build_scenario_evaluator(spec, provider, batch_size)
    table = MetricsTable()
    for seed in spec.seeds:
        student = train_for_seed(seed, evaluator)
        table.extend(evaluator.evaluate(student, method, backbone, seed))
        log_run_event("seed_evaluated", {"scenario": spec.kind.value, "seed": seed})
    table.aggregates = aggregate_rows(table.rows, evaluator.average_targets)
    return table
