"""Data models for dataset splits, few-shot episodes, and synthetic data."""

from collections import Counter
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return format(str(self.value), format_spec)

from ..utils.errors import ConfigurationError, ContractViolation
from .vlm import ClassSet


class SplitTag(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


SYNTHETIC_SCHEME = "synthetic://"


@dataclass(frozen=True)
class DatasetItem:
    """One sample: image path (or synthetic id), label index, class name."""

    impath: str
    label: int
    classname: str

    @property
    def is_synthetic(self) -> bool:
        return self.impath.startswith(SYNTHETIC_SCHEME)


@dataclass
class DatasetSplit:
    """Items of one split together with the dataset's class names."""

    items: list[DatasetItem]
    classnames: tuple[str, ...]
    tag: SplitTag

    def __post_init__(self) -> None:
        for item in self.items:
            if not 0 <= item.label < len(self.classnames):
                raise ContractViolation(
                    f"Label {item.label} outside {len(self.classnames)} classes"
                )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def class_set(self) -> ClassSet:
        return ClassSet(self.classnames)

    def class_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(item.label for item in self.items).items()))

    def restricted_to(self, names: ClassSet) -> "DatasetSplit":
        """Keep only items of the given classes, relabelled in `names` order."""
        position = {name: i for i, name in enumerate(names.names)}
        items = [
            DatasetItem(item.impath, position[item.classname], item.classname)
            for item in self.items
            if item.classname in position
        ]
        return DatasetSplit(items, names.names, self.tag)


@dataclass
class DatasetSplits:
    """The train/val/test triple of one dataset."""

    name: str
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit

    @property
    def classnames(self) -> tuple[str, ...]:
        return self.test.classnames

    @property
    def class_set(self) -> ClassSet:
        return ClassSet(self.classnames)

    @property
    def train_enabled(self) -> bool:
        return len(self.train) > 0

    def split(self, tag: SplitTag | str) -> DatasetSplit:
        return getattr(self, SplitTag(tag).value)

    def counts(self) -> dict[str, int]:
        return {tag.value: len(self.split(tag)) for tag in SplitTag}


@dataclass
class FewShotEpisode:
    """Seeded sample of at most `shots` training items per class."""

    items: list[DatasetItem]
    classnames: tuple[str, ...]
    shots: int
    seed: int

    def __len__(self) -> int:
        return len(self.items)

    @property
    def class_set(self) -> ClassSet:
        return ClassSet(self.classnames)

    def class_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(item.label for item in self.items).items()))

    def as_split(self) -> DatasetSplit:
        return DatasetSplit(list(self.items), self.classnames, SplitTag.TRAIN)


@dataclass(frozen=True)
class SyntheticVLConfig:
    """Planted-prototype world used for desk-scale experiments."""

    num_classes: int = 20
    train_per_class: int = 32
    val_per_class: int = 4
    test_per_class: int = 16
    embedding_dim: int = 64
    margin: float = 0.1
    noise_scale: float = 0.05
    domain_coherence: float = 0.7
    num_distractors: int = 180
    num_domain_shifts: int = 2
    domain_shift_scale: float = 0.08
    num_cross_datasets: int = 2
    cross_dataset_classes: int = 10
    # capacity gap descriptor
    teacher_layers: int = 2
    student_layers: int = 1
    student_rank: int = 48
    student_template_offset: float = 1.0
    student_norm_range: tuple[float, float] = (0.0625, 4.0)
    embedding_scale: float = 16.0
    teacher_accuracy_floor: float = 0.95
    vocab_size: int = 16384
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ConfigurationError("margin must be > 0")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0")
        if not 0.0 <= self.domain_coherence < 1.0:
            raise ConfigurationError("domain_coherence must be in [0, 1)")
        if not 1 <= self.student_rank <= self.embedding_dim:
            raise ConfigurationError("student_rank must be in [1, embedding_dim]")
        low, high = self.student_norm_range
        if not 0 < low <= high:
            raise ConfigurationError("student_norm_range must be positive and ordered")
        if self.student_layers < 0 or self.teacher_layers < 0:
            raise ConfigurationError("layer counts must be >= 0")
