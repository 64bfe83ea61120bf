"""The frozen student paired with its prompt learner."""

from collections.abc import Sequence
from dataclasses import dataclass

import torch

from ..models.experiment import DistillationConfig
from ..models.vlm import ClassSet, ProbabilityDistribution
from ..utils.errors import ContractViolation
from .prompt_learners import PromptLearner
from .vlm_core import (
    ToyDualEncoder,
    build_handcrafted_prompts,
    cosine_logits,
    normalized,
    pad_token_sequences,
)


@dataclass
class StudentOutput:
    """Prompted features, logits and class probabilities for one batch."""

    image_features: torch.Tensor  # (B, d)
    text_features: torch.Tensor  # (C, d) or (B, C, d)
    logits: torch.Tensor  # (B, C), cosine / tau
    class_set: ClassSet

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def distribution(self) -> ProbabilityDistribution:
        return ProbabilityDistribution(self.probs, self.class_set)


@dataclass
class FrozenReference:
    """Unprompted student outputs PromptSRC regularises toward."""

    image_features: torch.Tensor
    text_features: torch.Tensor
    probs: torch.Tensor


class PromptedStudent:
    """Student encoder (always frozen) plus the learner holding gamma."""

    def __init__(
        self,
        encoder: ToyDualEncoder,
        learner: PromptLearner,
        config: DistillationConfig,
    ) -> None:
        self.encoder = encoder.freeze()
        self.learner = learner
        self.config = config

    @property
    def temperature(self) -> float:
        return self.config.tau_student

    def forward(self, images: torch.Tensor, class_set: ClassSet) -> StudentOutput:
        class_set.require_classifiable()
        images = images.to(self.encoder.dtype)
        image_features = self.encoder.encode_image(images, self.learner.visual_plan())
        conditioning = image_features if self.learner.needs_image_features else None
        text_features = self.learner.encode_classes(self.encoder, class_set, conditioning)
        logits = cosine_logits(image_features, text_features, self.temperature)
        return StudentOutput(image_features, text_features, logits, class_set)

    __call__ = forward

    def predict(self, images: torch.Tensor, class_set: ClassSet) -> ProbabilityDistribution:
        return self.forward(images, class_set).distribution()

    @torch.no_grad()
    def frozen_reference(
        self, images: torch.Tensor, class_set: ClassSet, templates: Sequence[str]
    ) -> FrozenReference:
        """Unprompted image features and template-bank-averaged text features."""
        if not templates:
            raise ContractViolation("PromptSRC needs at least one bank template")
        image_features = self.encoder.encode_image(images.to(self.encoder.dtype))
        per_template = []
        for template in templates:
            padded = pad_token_sequences(
                build_handcrafted_prompts(self.encoder, class_set, template)
            )
            per_template.append(
                normalized(self.encoder.encode_text(padded.embeddings, padded.mask))
            )
        text_features = normalized(torch.stack(per_template).mean(dim=0))
        logits = cosine_logits(image_features, text_features, self.temperature)
        return FrozenReference(
            normalized(image_features), text_features, torch.softmax(logits, dim=-1)
        )


def student_predict(
    student: PromptedStudent, images: torch.Tensor, class_set: ClassSet
) -> list[ProbabilityDistribution]:
    batch = student.predict(images, class_set)
    return [batch[i] for i in range(len(batch))]
