"""Accuracy, harmonic mean, and cross-target/seed aggregation."""

from collections.abc import Iterable, Sequence
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import torch
from loguru import logger

from ..components.student import PromptedStudent
from ..datasets.registry import FeatureSource, FileSource, make_loader
from ..models.data import DatasetSplit
from ..models.experiment import MetricsRow
from ..models.vlm import ClassSet
from ..utils.errors import ContractViolation

MEAN_SEED = "mean"
AVERAGE_DATASET = "average"
HARMONIC_SPLIT = "H"
BASELINE_LABEL = "zeroshot"


def round_half_up(value: float, places: int = 2) -> float:
    """Report-time rounding; aggregation always uses full precision."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def accuracy_from_predictions(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(labels) == 0:
        raise ContractViolation("Cannot compute accuracy of an empty split")
    if len(predictions) != len(labels):
        raise ContractViolation("One prediction is required per label")
    correct = np.asarray(predictions) == np.asarray(labels)
    return 100.0 * float(correct.mean())


@torch.no_grad()
def evaluate_accuracy(
    student: PromptedStudent,
    split: DatasetSplit,
    source: FeatureSource | FileSource,
    class_set: ClassSet | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy (percent) of the prompted student over `split`."""
    if len(split) == 0:
        raise ContractViolation(f"Cannot evaluate on an empty {split.tag} split")
    class_set = class_set or split.class_set
    if class_set.names != split.classnames:
        raise ContractViolation("The class set must match the split's class names")

    predictions: list[int] = []
    labels: list[int] = []
    for batch in make_loader(split, source, batch_size):
        predictions.extend(student(batch.images, class_set).logits.argmax(dim=-1).tolist())
        labels.extend(batch.require_labels().tolist())
    return accuracy_from_predictions(predictions, labels)


def harmonic_mean(base: float, new: float) -> float:
    if base <= 0 or new <= 0:
        raise ContractViolation("Harmonic mean needs positive base and new accuracies")
    return 2 * base * new / (base + new)


def average_over_targets(per_dataset: Sequence[float]) -> float:
    if len(per_dataset) == 0:
        raise ContractViolation("No target accuracies to average")
    return float(np.mean(per_dataset))


def _present(rows: Iterable[MetricsRow]) -> list[MetricsRow]:
    return [row for row in rows if row.accuracy is not None]


def aggregate_rows(rows: Sequence[MetricsRow], targets: Sequence[str] = ()) -> list[MetricsRow]:
    """
    Derive seed means, target averages and base/new harmonic means.

    A (dataset, split) group with any missing seed yields a missing mean rather
    than an average over the seeds that happened to finish.
    """
    groups: dict[tuple, list[MetricsRow]] = {}
    for row in rows:
        key = (row.scenario, row.method, row.backbone, row.dataset, row.split)
        groups.setdefault(key, []).append(row)

    means: list[MetricsRow] = []
    for (scenario, method, backbone, dataset, split), members in groups.items():
        present = _present(members)
        accuracy = (
            float(np.mean([row.accuracy for row in present]))
            if present and len(present) == len(members)
            else None
        )
        means.append(MetricsRow(scenario, method, backbone, dataset, MEAN_SEED, split, accuracy))

    derived: list[MetricsRow] = []
    by_run: dict[tuple, dict[tuple[str, str], float | None]] = {}
    for row in means:
        by_run.setdefault((row.scenario, row.method, row.backbone), {})[
            (row.dataset, row.split)
        ] = row.accuracy

    for (scenario, method, backbone), values in by_run.items():
        for (dataset, split), new in values.items():
            if split != "new":
                continue
            base = values.get((dataset, "base"))
            h = harmonic_mean(base, new) if base and new else None
            derived.append(
                MetricsRow(scenario, method, backbone, dataset, MEAN_SEED, HARMONIC_SPLIT, h)
            )
        if targets:
            target_values = [values.get((t, "test")) for t in targets]
            if any(v is None for v in target_values):
                missing = [t for t, v in zip(targets, target_values) if v is None]
                logger.warning(f"Target average for {method} is NA; missing targets {missing}")
                average = None
            else:
                average = average_over_targets(target_values)
            derived.append(
                MetricsRow(scenario, method, backbone, AVERAGE_DATASET, MEAN_SEED, "test", average)
            )
    return means + derived
