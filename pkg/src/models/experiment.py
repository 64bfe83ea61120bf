"""Data models for experiment configuration, selections, and results."""

from dataclasses import asdict, dataclass, field
from datetime import datetime
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return format(str(self.value), format_spec)

import torch

from ..utils.errors import ConfigurationError
from .data import SyntheticVLConfig


class PromptMethod(StrEnum):
    ZEROSHOT = "zeroshot"
    COOP = "coop"
    COCOOP = "cocoop"
    VPT_SHALLOW = "vpt_shallow"
    VPT_DEEP = "vpt_deep"
    MAPLE = "maple"
    PROMPTSRC = "promptsrc"

    @property
    def injects_visual(self) -> bool:
        return self in (
            PromptMethod.VPT_SHALLOW,
            PromptMethod.VPT_DEEP,
            PromptMethod.MAPLE,
            PromptMethod.PROMPTSRC,
        )


class Objective(StrEnum):
    PLAIN = "plain"
    KDPL = "kdpl"
    CA_KDPL = "ca_kdpl"
    UPL_STAR = "upl_star"
    CA_UPL_STAR = "ca_upl_star"
    POMP_STAR = "pomp_star"

    @property
    def uses_teacher(self) -> bool:
        return self in (
            Objective.KDPL,
            Objective.CA_KDPL,
            Objective.UPL_STAR,
            Objective.CA_UPL_STAR,
        )

    @property
    def uses_vocabulary(self) -> bool:
        return self in (Objective.CA_KDPL, Objective.CA_UPL_STAR, Objective.POMP_STAR)

    @property
    def reads_labels(self) -> bool:
        return self in (Objective.PLAIN, Objective.POMP_STAR)


class KLMode(StrEnum):
    FORWARD = "forward"
    REVERSE = "reverse"
    SYMMETRIC = "symmetric"


class ScenarioKind(StrEnum):
    DOMAIN_GENERALIZATION = "domain_generalization"
    CROSS_DATASET = "cross_dataset"
    BASE_TO_NOVEL = "base_to_novel"
    CLASS_AGNOSTIC = "class_agnostic"


@dataclass(frozen=True)
class PromptConfig:
    """Prompt-learner hyperparameters."""

    method: PromptMethod = PromptMethod.COOP
    n_ctx: int = 4
    n_visual: int = 8
    depth: int = 1
    ctx_init: str = "a photo of a"
    init_std: float = 0.02
    meta_net_ratio: int = 16
    shared_coupling: bool = False
    # PromptSRC
    text_l1_weight: float = 1.0
    image_l1_weight: float = 1.0
    kl_weight: float = 1.0
    gaussian_mean: float = 15.0
    gaussian_std: float = 5.0


@dataclass(frozen=True)
class DistillationConfig:
    """Distillation objective settings."""

    kl_mode: KLMode = KLMode.SYMMETRIC
    tau_student: float = 0.01
    tau_teacher: float = 0.01
    epsilon: float = 1e-12
    teacher_template: str = "a photo of {}"
    student_template: str = "a photo of a {}"

    def __post_init__(self) -> None:
        if self.tau_student <= 0 or self.tau_teacher <= 0:
            raise ConfigurationError("temperatures must be > 0")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be > 0")
        for template in (self.teacher_template, self.student_template):
            if template.count("{}") != 1:
                raise ConfigurationError(f"template needs one {{}} placeholder: {template!r}")


@dataclass(frozen=True)
class TrainRunConfig:
    """Optimizer, schedule, and seed of one training run."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.02
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description."""

    name: str
    method: PromptMethod
    objective: Objective
    student_backbone: str
    teacher_backbone: str
    dataset: str
    scenario: ScenarioKind
    targets: list[str]
    shots: int
    num_selected: int
    seeds: list[int]
    train: TrainRunConfig
    prompt: PromptConfig
    distill: DistillationConfig
    synthetic: SyntheticVLConfig | None = None
    vocabulary_path: str | None = None
    output_dir: str = "outputs/default"
    cache_dir: str = "cache"
    eval_batch_size: int = 256
    workers: int = 1
    dtype: str = "float32"
    baseline: bool = True

    @property
    def method_label(self) -> str:
        if self.objective is Objective.PLAIN:
            return self.method.value
        return f"{self.method.value}+{self.objective.value}"

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunManifest:
    """Snapshot of everything that influences a run's numbers."""

    config: dict
    version: str
    command: str
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())


@dataclass(frozen=True)
class ScenarioSpec:
    """Evaluation protocol: where prompts are trained and where they are tested."""

    kind: ScenarioKind
    source: str
    targets: tuple[str, ...] = ()
    shots: int = 16
    seeds: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        if self.kind is ScenarioKind.BASE_TO_NOVEL and any(
            target != self.source for target in self.targets
        ):
            raise ConfigurationError("base_to_novel targets must be the source dataset")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")


@dataclass(frozen=True)
class SelectionResult:
    """Top-K class names picked for one batch."""

    indices: tuple[int, ...]
    names: tuple[str, ...]
    mean_probs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class MetricsRow:
    """One accuracy measurement; accuracy is None when the target was missing."""

    scenario: str
    method: str
    backbone: str
    dataset: str
    seed: str
    split: str
    accuracy: float | None


@dataclass
class MetricsTable:
    """Raw per-seed rows plus the aggregate rows derived from them."""

    rows: list[MetricsRow] = field(default_factory=list)
    aggregates: list[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def extend(self, rows: list[MetricsRow]) -> None:
        self.rows.extend(rows)

    @property
    def all_rows(self) -> list[MetricsRow]:
        return self.rows + self.aggregates
