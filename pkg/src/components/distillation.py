"""Distillation objectives and the frozen teacher that supplies their targets."""

import threading
from collections.abc import Sequence

import torch
from loguru import logger

from ..database.teacher_cache import TeacherPredictionCache
from ..models.experiment import DistillationConfig, KLMode
from ..models.vlm import ClassSet, ClassVocabulary, ProbabilityDistribution
from ..utils.errors import CacheCorruptionError, ContractViolation
from .vlm_core import (
    ToyDualEncoder,
    build_handcrafted_prompts,
    compute_class_probabilities,
    pad_token_sequences,
)

DEFAULT_EPSILON = 1e-12

Distribution = ProbabilityDistribution | torch.Tensor


def _probs_pair(p: Distribution, q: Distribution) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(p, ProbabilityDistribution) and isinstance(q, ProbabilityDistribution):
        p.require_same_classes(q)
    p_probs = p.probs if isinstance(p, ProbabilityDistribution) else p
    q_probs = q.probs if isinstance(q, ProbabilityDistribution) else q
    if p_probs.shape[-1] != q_probs.shape[-1]:
        raise ContractViolation(
            f"Distributions over {p_probs.shape[-1]} and {q_probs.shape[-1]} classes"
        )
    return p_probs, q_probs


def kl_divergence(
    p: Distribution, q: Distribution, epsilon: float = DEFAULT_EPSILON
) -> torch.Tensor:
    """sum_i p_i * ln((p_i + eps) / (q_i + eps)) over the last axis."""
    if epsilon <= 0:
        raise ContractViolation("epsilon must be > 0")
    p_probs, q_probs = _probs_pair(p, q)
    log_ratio = torch.log(p_probs + epsilon) - torch.log(q_probs + epsilon)
    return (p_probs * log_ratio).sum(dim=-1)


def kdpl_loss(
    p_teacher: Distribution,
    p_student: Distribution,
    mode: KLMode | str = KLMode.SYMMETRIC,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Per-image distillation loss; callers reduce over the batch."""
    match KLMode(mode):
        case KLMode.FORWARD:
            return kl_divergence(p_teacher, p_student, epsilon)
        case KLMode.REVERSE:
            return kl_divergence(p_student, p_teacher, epsilon)
        case KLMode.SYMMETRIC:
            return kl_divergence(p_teacher, p_student, epsilon) + kl_divergence(
                p_student, p_teacher, epsilon
            )


def upl_star_loss(
    p_student: Distribution,
    teacher_argmax: int | torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Cross-entropy against teacher pseudo-labels: -ln(p_S[label] + eps)."""
    probs = p_student.probs if isinstance(p_student, ProbabilityDistribution) else p_student
    labels = torch.as_tensor(teacher_argmax, device=probs.device, dtype=torch.long)
    num_classes = probs.shape[-1]
    if ((labels < 0) | (labels >= num_classes)).any():
        raise ContractViolation(f"Pseudo-label outside {num_classes} classes")
    picked = probs.gather(-1, labels.reshape(*probs.shape[:-1], 1)).squeeze(-1)
    return -torch.log(picked + epsilon)


class DistillationTeacher:
    """
    Frozen teacher producing fixed zero-shot targets.

    Text features are memoised per class set, image features per image id,
    and full distributions go through the persistent prediction cache when one
    is attached. Every path runs without gradient tracking.
    """

    def __init__(
        self,
        model: ToyDualEncoder,
        config: DistillationConfig,
        cache: TeacherPredictionCache | None = None,
    ) -> None:
        if not model.frozen:
            raise ContractViolation("Distillation teachers must be frozen")
        self.model = model
        self.config = config
        self.cache = cache
        self._lock = threading.Lock()
        self._text_features: dict[bytes, torch.Tensor] = {}
        self._image_features: dict[str, torch.Tensor] = {}
        self.recomputed_after_corruption = 0

    @property
    def temperature(self) -> float:
        return self.config.tau_teacher

    # -- features -----------------------------------------------------------

    @torch.no_grad()
    def text_features(self, class_set: ClassSet) -> torch.Tensor:
        digest = class_set.digest
        with self._lock:
            cached = self._text_features.get(digest)
        if cached is not None:
            return cached
        padded = pad_token_sequences(
            build_handcrafted_prompts(self.model, class_set, self.config.teacher_template)
        )
        features = self.model.encode_text(padded.embeddings, padded.mask)
        with self._lock:
            self._text_features[digest] = features
        return features

    def vocabulary_features(self, vocabulary: ClassVocabulary) -> torch.Tensor:
        """Text features over the whole vocabulary, computed once per run."""
        class_set = vocabulary.as_class_set()
        fresh = class_set.digest not in self._text_features
        features = self.text_features(class_set)
        if fresh:
            logger.info(f"Teacher text features ready for {vocabulary.size} vocabulary names")
        return features

    @torch.no_grad()
    def image_features(
        self, images: torch.Tensor, image_ids: Sequence[str] | None = None
    ) -> torch.Tensor:
        if image_ids is None:
            return self.model.encode_image(images.to(self.model.dtype))
        with self._lock:
            missing = [i for i, iid in enumerate(image_ids) if iid not in self._image_features]
        if missing:
            fresh = self.model.encode_image(images[missing].to(self.model.dtype))
            with self._lock:
                for row, i in enumerate(missing):
                    self._image_features[image_ids[i]] = fresh[row]
        with self._lock:
            return torch.stack([self._image_features[iid] for iid in image_ids])

    # -- predictions --------------------------------------------------------

    @torch.no_grad()
    def probabilities(
        self,
        images: torch.Tensor,
        text_features: torch.Tensor,
        image_ids: Sequence[str] | None = None,
    ) -> torch.Tensor:
        return compute_class_probabilities(
            self.image_features(images, image_ids), text_features, self.temperature
        )

    @torch.no_grad()
    def predict(
        self, images: torch.Tensor, image_ids: Sequence[str], class_set: ClassSet
    ) -> ProbabilityDistribution:
        """Teacher distributions over `class_set`, served from the cache when possible."""
        class_set.require_classifiable()
        if len(image_ids) != images.shape[0]:
            raise ContractViolation("One image id is required per image")
        if self.cache is None:
            probs = self.probabilities(images, self.text_features(class_set), image_ids)
            return ProbabilityDistribution(probs, class_set)

        digest = class_set.digest
        rows: list[torch.Tensor | None] = []
        for image_id in image_ids:
            try:
                stored = self.cache.get(image_id, digest)
            except CacheCorruptionError as e:
                logger.warning(f"Recomputing teacher prediction for {image_id}: {e}")
                self.recomputed_after_corruption += 1
                stored = None
            rows.append(
                None
                if stored is None
                else torch.from_numpy(stored).to(self.model.dtype)
            )

        missing = [i for i, row in enumerate(rows) if row is None]
        if missing:
            fresh = self.probabilities(
                images[missing],
                self.text_features(class_set),
                [image_ids[i] for i in missing],
            )
            for row, i in enumerate(missing):
                rows[i] = fresh[row]
                self.cache.put(
                    image_ids[i], digest, fresh[row].to(torch.float64).cpu().numpy()
                )
        return ProbabilityDistribution(torch.stack(rows), class_set)

    def pseudo_labels(
        self, images: torch.Tensor, image_ids: Sequence[str], class_set: ClassSet
    ) -> dict[str, int]:
        """Teacher argmax per image; computed once per episode and then frozen."""
        labels = self.predict(images, image_ids, class_set).argmax()
        return {iid: int(label) for iid, label in zip(image_ids, labels)}


def teacher_predict(
    teacher: DistillationTeacher,
    images: torch.Tensor,
    class_set: ClassSet,
    image_ids: Sequence[str],
) -> list[ProbabilityDistribution]:
    batch = teacher.predict(images, image_ids, class_set)
    return [batch[i] for i in range(len(batch))]

