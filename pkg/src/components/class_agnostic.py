"""Per-batch class selection from a large vocabulary."""

from collections.abc import Sequence

import numpy as np
import torch
from loguru import logger

from ..models.experiment import SelectionResult
from ..models.vlm import ClassVocabulary
from ..utils.errors import ContractViolation
from .distillation import DistillationTeacher
from .vlm_core import compute_class_probabilities


@torch.no_grad()
def stack_teacher_probs(
    teacher: DistillationTeacher,
    images: torch.Tensor,
    vocabulary: ClassVocabulary,
    image_ids: Sequence[str] | None = None,
) -> torch.Tensor:
    """P_T: one row of teacher probabilities over the whole vocabulary per image."""
    if images.shape[0] < 1:
        raise ContractViolation("At least one image is required")
    return teacher.probabilities(
        images, teacher.vocabulary_features(vocabulary), image_ids
    )


def mean_over_batch(stacked: torch.Tensor) -> torch.Tensor:
    if stacked.dim() != 2 or stacked.shape[0] < 1:
        raise ContractViolation("Expected a non-empty (N, C) probability matrix")
    return stacked.mean(dim=0)


def clamp_selection_size(k: int, vocabulary_size: int) -> int:
    if k < 1:
        raise ContractViolation(f"K must be >= 1, got {k}")
    if k > vocabulary_size:
        logger.warning(f"K={k} exceeds the {vocabulary_size}-name vocabulary; using K={vocabulary_size}")
        return vocabulary_size
    return k


def select_topk(
    mean_probs: torch.Tensor, k: int, vocabulary: ClassVocabulary | None = None
) -> SelectionResult:
    """The min(K, C) most probable names, ties broken by lower index, returned in index order."""
    if k < 1:
        raise ContractViolation(f"K must be >= 1, got {k}")
    values = mean_probs.detach().to(torch.float64).reshape(-1)
    count = min(k, values.numel())
    order = torch.sort(values, descending=True, stable=True).indices[:count]
    indices = torch.sort(order).values.tolist()
    names = (
        tuple(vocabulary.names[i] for i in indices)
        if vocabulary is not None
        else tuple(str(i) for i in indices)
    )
    return SelectionResult(
        indices=tuple(indices),
        names=names,
        mean_probs=tuple(float(values[i]) for i in indices),
    )


def select_from_teacher(
    teacher: DistillationTeacher,
    images: torch.Tensor,
    vocabulary: ClassVocabulary,
    k: int,
    image_ids: Sequence[str] | None = None,
) -> SelectionResult:
    k = clamp_selection_size(k, vocabulary.size)
    stacked = stack_teacher_probs(teacher, images, vocabulary, image_ids)
    return select_topk(mean_over_batch(stacked), k, vocabulary)


@torch.no_grad()
def restricted_teacher_probs(
    teacher: DistillationTeacher,
    images: torch.Tensor,
    vocabulary: ClassVocabulary,
    selection: SelectionResult,
    image_ids: Sequence[str] | None = None,
) -> torch.Tensor:
    """Fresh softmax over the selected names' cosines only."""
    features = teacher.vocabulary_features(vocabulary)[list(selection.indices)]
    return compute_class_probabilities(
        teacher.image_features(images, image_ids), features, teacher.temperature
    )


def pomp_star_select(
    batch_labels: Sequence[int] | torch.Tensor | None,
    vocabulary: ClassVocabulary,
    k: int,
    seed: int,
) -> SelectionResult:
    """
    True batch classes plus uniformly drawn distinct others, exactly min(K, C) names.

    When the batch holds more than K distinct classes, K of them are kept at
    random and nothing is supplemented.
    """
    if batch_labels is None:
        raise ContractViolation("Random-supplement selection needs ground-truth labels")
    labels = np.asarray(
        batch_labels.tolist() if isinstance(batch_labels, torch.Tensor) else batch_labels,
        dtype=np.int64,
    )
    if labels.size == 0 or (labels < 0).any() or (labels >= vocabulary.size).any():
        raise ContractViolation("Batch labels must be valid vocabulary indices")
    k = clamp_selection_size(k, vocabulary.size)
    rng = np.random.default_rng(seed)
    true_classes = np.unique(labels)
    if true_classes.size > k:
        true_classes = rng.choice(true_classes, size=k, replace=False)
    chosen = set(true_classes.tolist())
    if len(chosen) < k:
        others = np.setdiff1d(np.arange(vocabulary.size), np.fromiter(chosen, dtype=np.int64))
        extra = rng.choice(others, size=k - len(chosen), replace=False)
        chosen.update(extra.tolist())
    indices = tuple(sorted(chosen))
    return SelectionResult(
        indices=indices,
        names=tuple(vocabulary.names[i] for i in indices),
        mean_probs=(),
    )
