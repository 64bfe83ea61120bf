"""Shared fixtures: tiny toy encoders and a small planted synthetic world."""

import pytest
import torch

from src.components.distillation import DistillationTeacher
from src.components.vlm_core import ToyDualEncoder
from src.datasets.synthetic import generate_synthetic
from src.models.data import SyntheticVLConfig
from src.models.experiment import DistillationConfig
from src.models.vlm import ClassSet, EncoderConfig, ModelRole
from src.utils.config import Settings

TOY_CONFIG = EncoderConfig(
    shared_dim=16,
    text_token_dim=16,
    patch_dim=16,
    num_layers=2,
    num_patches=2,
    vocab_size=512,
    max_text_len=16,
    num_heads=2,
    mlp_ratio=2,
    input_kind="features",
    feature_dim=16,
)

SMALL_WORLD = SyntheticVLConfig(
    num_classes=8,
    train_per_class=8,
    val_per_class=2,
    test_per_class=4,
    embedding_dim=32,
    num_distractors=24,
    num_cross_datasets=2,
    cross_dataset_classes=6,
    student_rank=24,
)

# SMALL_WORLD as a YAML "synthetic" section, for end-to-end runs.
TINY_WORLD = {
    "num_classes": 8,
    "train_per_class": 8,
    "val_per_class": 2,
    "test_per_class": 4,
    "embedding_dim": 32,
    "num_distractors": 24,
    "num_cross_datasets": 2,
    "cross_dataset_classes": 6,
    "student_rank": 24,
}

CLASS_NAMES = ("cat", "dog", "car", "tree", "boat")


@pytest.fixture
def class_set() -> ClassSet:
    return ClassSet(CLASS_NAMES)


@pytest.fixture
def toy_student() -> ToyDualEncoder:
    return ToyDualEncoder(TOY_CONFIG, ModelRole.STUDENT, seed=1, dtype=torch.float64)


@pytest.fixture
def toy_teacher() -> ToyDualEncoder:
    return ToyDualEncoder(TOY_CONFIG, ModelRole.TEACHER, seed=2, dtype=torch.float64)


@pytest.fixture
def distill_config() -> DistillationConfig:
    return DistillationConfig()


@pytest.fixture
def teacher(toy_teacher, distill_config) -> DistillationTeacher:
    return DistillationTeacher(toy_teacher, distill_config)


@pytest.fixture
def images() -> torch.Tensor:
    generator = torch.Generator().manual_seed(0)
    return torch.randn(6, TOY_CONFIG.feature_dim, generator=generator, dtype=torch.float64)


@pytest.fixture(scope="session")
def small_world():
    return generate_synthetic(SMALL_WORLD)


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(
        data_root=tmp_path / "data",
        cache_root=tmp_path / "cache",
        output_root=tmp_path / "outputs",
        log_dir=tmp_path / "logs",
    )
