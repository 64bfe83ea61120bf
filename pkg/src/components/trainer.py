"""Prompt-only training loop for every supported objective."""

import math
import random
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from tqdm import tqdm

from ..datasets.registry import Batch
from ..models.experiment import (
    DistillationConfig,
    Objective,
    PromptConfig,
    SelectionResult,
    TrainRunConfig,
)
from ..models.vlm import ClassSet, ClassVocabulary
from ..utils.errors import ContractViolation, TrainingDivergedError
from ..utils.logger import log_epoch_event, log_selection_event, log_train_step
from .class_agnostic import (
    pomp_star_select,
    restricted_teacher_probs,
    select_from_teacher,
)
from .distillation import DistillationTeacher, kdpl_loss, upl_star_loss
from .prompt_learners import (
    PromptSRCLearner,
    RegularizerWeights,
    gaussian_aggregate,
    promptsrc_regularizer,
)
from .student import PromptedStudent
from .vlm_core import normalized


def seed_everything(seed: int) -> None:
    """Seed every RNG that can influence a run."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def warmup_cosine_factor(epoch: int, config: TrainRunConfig) -> float:
    """LR multiplier: constant warm-up LR, then cosine decay to zero."""
    if epoch < config.warmup_epochs:
        return config.warmup_lr / config.lr if config.lr > 0 else 0.0
    span = max(1, config.epochs - config.warmup_epochs)
    progress = (epoch - config.warmup_epochs) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepResult:
    loss: float
    selection: SelectionResult | None = None


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


class PromptTrainer:
    """
    Updates only the learner's gamma; encoders and teacher stay frozen.

    One trainer is a single writer: `train_step` refuses to run concurrently
    with itself.
    """

    def __init__(
        self,
        student: PromptedStudent,
        objective: Objective,
        train_config: TrainRunConfig,
        distill_config: DistillationConfig,
        prompt_config: PromptConfig | None = None,
        teacher: DistillationTeacher | None = None,
        vocabulary: ClassVocabulary | None = None,
        num_selected: int = 1000,
        template_bank: Sequence[str] = (),
        progress: bool = False,
    ) -> None:
        self.student = student
        self.learner = student.learner
        self.objective = Objective(objective)
        self.train_config = train_config
        self.distill_config = distill_config
        self.prompt_config = prompt_config or self.learner.config
        self.teacher = teacher
        self.vocabulary = vocabulary
        self.num_selected = num_selected
        self.template_bank = list(template_bank)
        self.progress = progress

        if self.objective.uses_teacher and teacher is None:
            raise ContractViolation(f"Objective {self.objective} needs a teacher")
        if self.objective.uses_vocabulary and vocabulary is None:
            raise ContractViolation(f"Objective {self.objective} needs a vocabulary")
        if isinstance(self.learner, PromptSRCLearner) and not self.template_bank:
            raise ContractViolation("PromptSRC training needs a template bank")

        params = self.learner.trainable_parameters()
        if not params:
            raise ContractViolation(f"{self.learner.method} has nothing to train")
        self.optimizer = torch.optim.SGD(
            params,
            lr=train_config.lr,
            momentum=train_config.momentum,
            weight_decay=train_config.weight_decay,
        )
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda epoch: warmup_cosine_factor(epoch, train_config)
        )
        self.regularizer_weights = RegularizerWeights.from_config(self.prompt_config)

        self.pseudo_labels: dict[str, int] = {}
        self.selection_log: list[SelectionResult] = []
        self.step = 0
        self._label_to_vocab: torch.Tensor | None = None
        self._lock = threading.Lock()

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def set_pseudo_labels(self, labels: dict[str, int]) -> None:
        """Freeze teacher pseudo-labels for the episode (computed once)."""
        self.pseudo_labels = dict(labels)

    def bind_class_set(self, class_set: ClassSet) -> None:
        """Map dataset label indices to vocabulary indices for random-supplement selection."""
        if self.vocabulary is not None:
            self._label_to_vocab = torch.tensor(
                self.vocabulary.indices_of(class_set.names), dtype=torch.long
            )

    # -- losses -------------------------------------------------------------

    def _student_loss_terms(
        self, batch: Batch, class_set: ClassSet
    ) -> tuple[torch.Tensor, SelectionResult | None]:
        mode, eps = self.distill_config.kl_mode, self.distill_config.epsilon
        selection = None

        match self.objective:
            case Objective.PLAIN:
                labels = batch.require_labels()
                output = self.student(batch.images, class_set)
                loss = F.nll_loss(output.log_probs, labels)
            case Objective.KDPL:
                targets = self.teacher.predict(
                    batch.teacher_images, batch.image_ids, class_set
                ).probs
                output = self.student(batch.images, class_set)
                loss = kdpl_loss(targets, output.probs, mode, eps).mean()
            case Objective.UPL_STAR:
                missing = [i for i in batch.image_ids if i not in self.pseudo_labels]
                if missing:
                    raise ContractViolation(
                        f"No frozen pseudo-label for {len(missing)} images; "
                        "call set_pseudo_labels first"
                    )
                labels = torch.tensor([self.pseudo_labels[i] for i in batch.image_ids])
                output = self.student(batch.images, class_set)
                loss = upl_star_loss(output.probs, labels, eps).mean()
            case Objective.CA_KDPL | Objective.CA_UPL_STAR:
                selection = select_from_teacher(
                    self.teacher,
                    batch.teacher_images,
                    self.vocabulary,
                    self.num_selected,
                    batch.image_ids,
                )
                targets = restricted_teacher_probs(
                    self.teacher,
                    batch.teacher_images,
                    self.vocabulary,
                    selection,
                    batch.image_ids,
                )
                class_set = ClassSet(selection.names)
                output = self.student(batch.images, class_set)
                if self.objective is Objective.CA_KDPL:
                    loss = kdpl_loss(targets, output.probs, mode, eps).mean()
                else:
                    loss = upl_star_loss(output.probs, targets.argmax(dim=-1), eps).mean()
            case Objective.POMP_STAR:
                if self._label_to_vocab is None:
                    raise ContractViolation("bind_class_set must run before this objective")
                vocab_labels = self._label_to_vocab[batch.require_labels()]
                selection = pomp_star_select(
                    vocab_labels,
                    self.vocabulary,
                    self.num_selected,
                    seed=self.train_config.seed * 1_000_003 + self.step,
                )
                position = {index: i for i, index in enumerate(selection.indices)}
                # Samples whose class was not selected are ignored by the loss.
                labels = torch.tensor([position.get(int(v), -100) for v in vocab_labels])
                class_set = ClassSet(selection.names)
                output = self.student(batch.images, class_set)
                loss = F.nll_loss(output.log_probs, labels, ignore_index=-100)

        if isinstance(self.learner, PromptSRCLearner):
            reference = self.student.frozen_reference(
                batch.images, class_set, self.template_bank
            )
            loss = loss + promptsrc_regularizer(
                normalized(output.image_features),
                normalized(output.text_features),
                reference.image_features,
                reference.text_features,
                output.probs,
                reference.probs,
                self.regularizer_weights,
            )
        return loss, selection

    def batch_loss(self, batch: Batch, class_set: ClassSet) -> torch.Tensor:
        """Differentiable loss of one batch without touching the optimizer."""
        return self._student_loss_terms(batch, class_set)[0]

    # -- updates ------------------------------------------------------------

    def train_step(self, batch: Batch, class_set: ClassSet) -> StepResult:
        """One SGD update of gamma on the mean per-image loss."""
        if not self._lock.acquire(blocking=False):
            raise ContractViolation("train_step is already running on this trainer")
        try:
            loss, selection = self._student_loss_terms(batch, class_set)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    "Training loss became non-finite", batch.image_ids, self.learner.norm()
                )
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            self.step += 1
            value = float(loss.detach())
            log_train_step(self.step, self.scheduler.last_epoch + 1, value, self.lr)
            if selection is not None:
                self.selection_log.append(selection)
                mass = float(sum(selection.mean_probs)) if selection.mean_probs else 0.0
                log_selection_event(self.step, list(selection.names), mass)
            return StepResult(value, selection)
        finally:
            self._lock.release()

    def ca_train_step(self, batch: Batch, class_set: ClassSet | None = None) -> StepResult:
        """Class-agnostic step: names come from the vocabulary, never the dataset."""
        if not self.objective.uses_vocabulary:
            raise ContractViolation(f"Objective {self.objective} is not class-agnostic")
        placeholder = class_set or self.vocabulary.as_class_set()
        return self.train_step(batch, placeholder)

    def fit(
        self,
        loader: Iterable[Batch],
        class_set: ClassSet,
        epochs: int | None = None,
    ) -> TrainingHistory:
        """Run all epochs; PromptSRC ends with Gaussian aggregation of epoch snapshots."""
        epochs = epochs or self.train_config.epochs
        if self.objective is Objective.POMP_STAR:
            self.bind_class_set(class_set)
        history = TrainingHistory()
        snapshots = []

        for epoch in range(epochs):
            history.learning_rates.append(self.lr)
            losses = []
            for batch in tqdm(
                loader,
                desc=f"Epoch {epoch + 1}/{epochs}",
                disable=not self.progress,
                leave=False,
            ):
                losses.append(self.train_step(batch, class_set).loss)
            if not losses:
                raise ContractViolation("The training loader yielded no batches")
            history.step_losses.extend(losses)
            history.epoch_losses.append(float(np.mean(losses)))
            self.scheduler.step()

            if isinstance(self.learner, PromptSRCLearner):
                snapshots.append(self.learner.snapshot())
            log_epoch_event(
                "epoch_completed",
                {
                    "epoch": epoch + 1,
                    "loss": round(history.epoch_losses[-1], 6),
                    "lr": history.learning_rates[-1],
                    "prompt_norm": round(self.learner.norm(), 6),
                },
            )

        if snapshots:
            mean, std = self.learner.aggregation_schedule(epochs)
            self.learner.load_snapshot(gaussian_aggregate(snapshots, mean, std))
            log_epoch_event(
                "prompt_aggregated", {"snapshots": len(snapshots), "mean": mean, "std": std}
            )
        logger.info(
            f"Trained {self.learner.method} with {self.objective} for {epochs} epochs; "
            f"final loss {history.epoch_losses[-1]:.4f}"
        )
        return history
