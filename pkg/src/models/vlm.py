"""Data models for dual-encoder models, class sets, and predictions."""

import hashlib
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return format(str(self.value), format_spec)
from pathlib import Path

import torch

from ..utils.errors import ConfigurationError, ContractViolation, ShapeError


class ModelRole(StrEnum):
    """Role a dual encoder plays in distillation."""

    TEACHER = "teacher"
    STUDENT = "student"


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and architecture of a toy dual encoder."""

    shared_dim: int = 64
    text_token_dim: int = 64
    patch_dim: int = 64
    num_layers: int = 2
    num_patches: int = 49
    vocab_size: int = 16384
    max_text_len: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    use_layer_norm: bool = True
    image_arch: str = "vit"  # "vit" or "mlp"
    input_kind: str = "pixels"  # "pixels" or "features"
    image_size: int = 224
    patch_size: int = 32
    in_channels: int = 3
    feature_dim: int = 0

    def __post_init__(self) -> None:
        for name in (
            "shared_dim",
            "text_token_dim",
            "patch_dim",
            "num_patches",
            "vocab_size",
            "max_text_len",
            "num_heads",
            "mlp_ratio",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ConfigurationError("num_layers must be >= 0")
        if self.image_arch not in ("vit", "mlp"):
            raise ConfigurationError(f"Unknown image_arch: {self.image_arch}")
        if self.input_kind not in ("pixels", "features"):
            raise ConfigurationError(f"Unknown input_kind: {self.input_kind}")
        for dim in (self.text_token_dim, self.patch_dim):
            if dim % self.num_heads:
                raise ConfigurationError(
                    f"Token dim {dim} is not divisible by {self.num_heads} heads"
                )
        if self.input_kind == "pixels":
            if self.image_size % self.patch_size:
                raise ConfigurationError("image_size must be a multiple of patch_size")
            expected = (self.image_size // self.patch_size) ** 2
            if self.image_arch == "vit" and self.num_patches != expected:
                raise ConfigurationError(
                    f"num_patches={self.num_patches} but a {self.image_size}px "
                    f"image with {self.patch_size}px patches has {expected}"
                )
        else:
            if self.feature_dim < 1:
                raise ConfigurationError("feature inputs need feature_dim >= 1")
            if self.feature_dim % self.num_patches:
                raise ConfigurationError(
                    "feature_dim must split evenly into num_patches chunks"
                )

    @property
    def patch_input_dim(self) -> int:
        """Length of one flattened patch before projection."""
        if self.input_kind == "features":
            return self.feature_dim // self.num_patches
        return self.in_channels * self.patch_size**2

    @property
    def is_vit(self) -> bool:
        return self.image_arch == "vit"


@dataclass(frozen=True)
class ClassSet:
    """Ordered list of unique class names."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ContractViolation("Class set contains duplicate names")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassSet":
        return cls(tuple(names))

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, indices: Sequence[int]) -> "ClassSet":
        return ClassSet(tuple(self.names[i] for i in indices))

    @property
    def digest(self) -> bytes:
        """SHA-256 over the JSON-encoded ordered names; equal only for identical lists."""
        payload = json.dumps(list(self.names), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(payload).digest()

    def require_classifiable(self) -> None:
        if self.size < 2:
            raise ContractViolation(
                f"Classification needs at least 2 classes, got {self.size}"
            )


def normalize_class_name(name: str) -> str:
    """Lowercase and strip surrounding whitespace."""
    return name.strip().lower()


@dataclass(frozen=True)
class ClassVocabulary:
    """Large candidate list of class names for class-agnostic adaptation."""

    names: tuple[str, ...]

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassVocabulary":
        """Normalize names and drop duplicates, keeping the first occurrence."""
        seen: dict[str, None] = {}
        for raw in names:
            name = normalize_class_name(raw)
            if name and name not in seen:
                seen[name] = None
        if not seen:
            raise ContractViolation("Vocabulary is empty after normalization")
        return cls(tuple(seen))

    @classmethod
    def from_file(cls, path: str | Path) -> "ClassVocabulary":
        """One name per line; blank lines and lines starting with `#` are ignored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        names = (line.strip() for line in lines)
        return cls.from_names(name for name in names if name and not name.startswith("#"))

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def as_class_set(self) -> ClassSet:
        return ClassSet(self.names)

    def indices_of(self, names: Iterable[str]) -> list[int]:
        """Vocabulary index of each (normalized) name."""
        lookup = {name: i for i, name in enumerate(self.names)}
        indices = []
        for name in names:
            key = normalize_class_name(name)
            if key not in lookup:
                raise ContractViolation(f"'{name}' is not in the vocabulary")
            indices.append(lookup[key])
        return indices


@dataclass
class TokenSequence:
    """Token-space embeddings of one prompt, shape (L, d_w)."""

    embeddings: torch.Tensor

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[-1]


@dataclass
class ProbabilityDistribution:
    """Class probabilities over an ordered class set; probs has shape (..., C)."""

    probs: torch.Tensor
    class_set: ClassSet = field(repr=False)

    def __post_init__(self) -> None:
        if self.probs.shape[-1] != self.class_set.size:
            raise ShapeError(
                f"{self.probs.shape[-1]} probabilities for "
                f"{self.class_set.size} classes"
            )

    def __len__(self) -> int:
        return 1 if self.probs.dim() == 1 else self.probs.shape[0]

    def __getitem__(self, index: int) -> "ProbabilityDistribution":
        return ProbabilityDistribution(self.probs[index], self.class_set)

    def require_same_classes(self, other: "ProbabilityDistribution") -> None:
        if self.class_set != other.class_set:
            raise ContractViolation("Distributions are over different class sets")

    def argmax(self) -> torch.Tensor:
        return self.probs.argmax(dim=-1)
