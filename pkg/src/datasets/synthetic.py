"""
Planted-prototype world for desk-scale experiments.

Every class owns a unit prototype in the shared space. A "photo" of a class
is a feature vector: its prototype plus Gaussian noise. The teacher is wired
so its text feature for a class is exactly that prototype, which makes it an
accurate zero-shot classifier by construction. The student sees the images
through a rank-reduced projection, and its hand-crafted template adds a shared
offset to every class prompt on top of unequal class-token norms. Learned
contexts can cancel the offset; nothing can recover the lost rank.

Planted encoders have no LayerNorm, zero positional embeddings, and zero
query/key weights, so attention is a uniform average and every feature is a
linear function of the inputs.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from ..components.vlm_core import (
    ToyDualEncoder,
    ToyTokenizer,
    build_handcrafted_prompts,
    compute_class_probabilities,
    pad_token_sequences,
)
from ..database.checkpoints import load_model, save_model
from ..models.data import (
    SYNTHETIC_SCHEME,
    DatasetItem,
    DatasetSplit,
    DatasetSplits,
    SplitTag,
    SyntheticVLConfig,
)
from ..models.vlm import ClassVocabulary, EncoderConfig, ModelRole
from ..utils.errors import GenerationError
from .splits import load_splits, write_splits

SOURCE_NAME = "synthetic"
TEACHER_TEMPLATE_WORDS = ("a", "photo", "of")
STUDENT_TEMPLATE_WORDS = ("a", "photo", "of", "a")
TEACHER_TEMPLATE = " ".join(TEACHER_TEMPLATE_WORDS) + " {}"

_ONSETS = "b c d f g h j k l m n p r s t v w z br cl dr gr pl st tr".split()
_VOWELS = "a e i o u ai ea ou".split()
_CODAS = ["", "", "n", "r", "s", "l", "x"]

MAX_PROTOTYPE_ATTEMPTS = 2000


def planted_encoder_config(config: SyntheticVLConfig, num_layers: int) -> EncoderConfig:
    dim = config.embedding_dim
    return EncoderConfig(
        shared_dim=dim,
        text_token_dim=dim,
        patch_dim=dim,
        num_layers=num_layers,
        num_patches=1,
        vocab_size=config.vocab_size,
        num_heads=1,
        use_layer_norm=False,
        input_kind="features",
        feature_dim=dim,
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_prototypes(
    count: int,
    dim: int,
    margin: float,
    rng: np.random.Generator,
    existing: np.ndarray | None = None,
    shared_direction: np.ndarray | None = None,
    coherence: float = 0.0,
) -> np.ndarray:
    """Unit vectors whose pairwise cosine (also against `existing`) is at most 1 - margin."""
    accepted = [] if existing is None else list(existing)
    fresh = []
    for index in range(count):
        for _ in range(MAX_PROTOTYPE_ATTEMPTS):
            candidate = _unit(rng.standard_normal(dim))
            if shared_direction is not None and coherence > 0:
                candidate = _unit(
                    np.sqrt(coherence) * shared_direction + np.sqrt(1 - coherence) * candidate
                )
            if not accepted or max(float(candidate @ other) for other in accepted) <= 1 - margin:
                accepted.append(candidate)
                fresh.append(candidate)
                break
        else:
            raise GenerationError(
                f"Could not place prototype {index + 1} of {count} with cosine margin "
                f"{margin} in {dim} dimensions; increase embedding_dim or lower margin"
            )
    return np.stack(fresh) if fresh else np.zeros((0, dim))


def _pseudo_word(rng: np.random.Generator) -> str:
    syllables = int(rng.integers(2, 4))
    parts = [
        str(rng.choice(_ONSETS)) + str(rng.choice(_VOWELS)) for _ in range(syllables)
    ]
    return "".join(parts) + str(rng.choice(_CODAS))


def sample_class_names(
    count: int, tokenizer: ToyTokenizer, rng: np.random.Generator, reserved: set[int]
) -> list[str]:
    """Single-token pseudo-words whose token ids collide with nothing used so far."""
    names: list[str] = []
    used = set(reserved)
    while len(names) < count:
        word = _pseudo_word(rng)
        token = tokenizer.token_id(word)
        if token in used:
            continue
        used.add(token)
        names.append(word)
    return names


@dataclass
class SyntheticWorld:
    """Datasets, feature vectors, vocabulary, and planted encoders of one generated world."""

    config: SyntheticVLConfig
    datasets: dict[str, DatasetSplits]
    features: np.ndarray
    feature_index: dict[str, int]
    vocabulary: ClassVocabulary
    prototypes: dict[str, np.ndarray]
    teacher_state: dict[str, torch.Tensor] = field(repr=False)
    student_state: dict[str, torch.Tensor] = field(repr=False)
    teacher_accuracy: float = 0.0

    @property
    def source(self) -> DatasetSplits:
        return self.datasets[SOURCE_NAME]

    def targets(self, prefix: str) -> list[str]:
        return [name for name in self.datasets if name.startswith(f"{SOURCE_NAME}_{prefix}")]

    @property
    def domain_shift_targets(self) -> list[str]:
        return self.targets("shift")

    @property
    def cross_dataset_targets(self) -> list[str]:
        return self.targets("xd")

    def images(self, image_ids: list[str]) -> torch.Tensor:
        rows = [self.feature_index[image_id] for image_id in image_ids]
        return torch.from_numpy(self.features[rows]).to(torch.float32)

    def build_teacher(self, dtype: torch.dtype = torch.float32) -> ToyDualEncoder:
        model = ToyDualEncoder(
            planted_encoder_config(self.config, self.config.teacher_layers),
            ModelRole.TEACHER,
            dtype=dtype,
        )
        model.load_state_dict(self.teacher_state)
        return model

    def build_student(self, dtype: torch.dtype = torch.float32) -> ToyDualEncoder:
        model = ToyDualEncoder(
            planted_encoder_config(self.config, self.config.student_layers),
            ModelRole.STUDENT,
            dtype=dtype,
        )
        model.load_state_dict(self.student_state)
        return model


def _plant_common(model: ToyDualEncoder, image_map: np.ndarray) -> None:
    """Identity text blocks, uniform-average image blocks, identity projections."""
    dim = model.config.shared_dim
    eye = torch.eye(dim, dtype=model.dtype)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
        model.text_projection.weight.copy_(eye)
        model.image_projection.weight.copy_(eye)
        model.patch_embedding.weight.copy_(torch.as_tensor(image_map, dtype=model.dtype))
        for block in model.image_blocks:
            block.attn.qkv.weight[2 * dim :].copy_(eye)
            block.attn.out_proj.weight.copy_(eye)


def _plant_teacher(
    config: SyntheticVLConfig, prototypes: dict[str, np.ndarray]
) -> ToyDualEncoder:
    model = ToyDualEncoder(
        planted_encoder_config(config, config.teacher_layers), ModelRole.TEACHER
    )
    _plant_common(model, np.eye(config.embedding_dim))
    table = model.token_embedding.weight
    with torch.no_grad():
        for name, prototype in prototypes.items():
            token = model.tokenizer.token_id(name)
            table[token] = torch.as_tensor(prototype * config.embedding_scale, dtype=table.dtype)
    return model


def _plant_student(
    config: SyntheticVLConfig,
    prototypes: dict[str, np.ndarray],
    rng: np.random.Generator,
) -> ToyDualEncoder:
    dim = config.embedding_dim
    model = ToyDualEncoder(
        planted_encoder_config(config, config.student_layers), ModelRole.STUDENT
    )
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    kept = basis[:, : config.student_rank]
    _plant_common(model, kept @ kept.T)

    table = model.token_embedding.weight
    tokenizer = model.tokenizer
    words = sorted(set(STUDENT_TEMPLATE_WORDS))
    raw = {word: rng.standard_normal(dim) for word in words}
    offset = sum(raw[word] for word in STUDENT_TEMPLATE_WORDS)
    rescale = config.student_template_offset * config.embedding_scale / np.linalg.norm(offset)
    low, high = config.student_norm_range
    with torch.no_grad():
        for word in words:
            table[tokenizer.token_id(word)] = torch.as_tensor(raw[word] * rescale, dtype=table.dtype)
        for name, prototype in prototypes.items():
            norm = float(np.exp(rng.uniform(np.log(low), np.log(high))))
            table[tokenizer.token_id(name)] = torch.as_tensor(
                prototype * norm * config.embedding_scale, dtype=table.dtype
            )
    return model


def _make_split(
    dataset: str,
    tag: SplitTag,
    classnames: tuple[str, ...],
    per_class: int,
    prototypes: dict[str, np.ndarray],
    shift: np.ndarray,
    noise: float,
    rng: np.random.Generator,
    features: list[np.ndarray],
    feature_index: dict[str, int],
) -> DatasetSplit:
    items = []
    for label, name in enumerate(classnames):
        for _ in range(per_class):
            image_id = f"{SYNTHETIC_SCHEME}{dataset}/{tag.value}/{len(items):05d}"
            vector = prototypes[name] + shift + noise * rng.standard_normal(len(shift))
            feature_index[image_id] = len(features)
            features.append(vector)
            items.append(DatasetItem(image_id, label, name))
    return DatasetSplit(items, classnames, tag)


def _teacher_accuracy(
    teacher: ToyDualEncoder,
    world_features: np.ndarray,
    feature_index: dict,
    split: DatasetSplit,
    template: str,
) -> float:
    padded = pad_token_sequences(
        build_handcrafted_prompts(teacher, split.class_set, template)
    )
    with torch.no_grad():
        text = teacher.encode_text(padded.embeddings, padded.mask)
        rows = [feature_index[item.impath] for item in split.items]
        images = torch.as_tensor(world_features[rows], dtype=teacher.dtype)
        probs = compute_class_probabilities(teacher.encode_image(images), text, 0.01)
    labels = torch.tensor([item.label for item in split.items])
    return 100.0 * float((probs.argmax(dim=-1) == labels).double().mean())


def generate_synthetic(
    config: SyntheticVLConfig = SyntheticVLConfig(),
    teacher_template: str = TEACHER_TEMPLATE,
) -> SyntheticWorld:
    """
    Generate datasets plus the planted teacher and degraded student.

    The teacher accuracy floor is checked with `teacher_template`.

    Raises:
        GenerationError: If prototypes cannot keep the margin at this dimension,
            or the planted teacher falls below its accuracy floor
    """
    if config.teacher_layers < 1 or config.student_layers < 1:
        raise GenerationError("Planted encoders need at least one layer")
    needed_cross = config.num_cross_datasets * config.cross_dataset_classes
    if needed_cross > config.num_distractors:
        raise GenerationError(
            f"{needed_cross} cross-dataset classes need at least that many distractors"
        )

    rng = np.random.default_rng(config.seed)
    dim = config.embedding_dim
    tokenizer = ToyTokenizer(config.vocab_size)
    reserved = {tokenizer.token_id(w) for w in TEACHER_TEMPLATE_WORDS + STUDENT_TEMPLATE_WORDS}

    names = sample_class_names(config.num_classes + config.num_distractors, tokenizer, rng, reserved)
    true_names = tuple(names[: config.num_classes])
    distractor_names = tuple(names[config.num_classes :])

    shared = _unit(rng.standard_normal(dim))
    true_protos = sample_prototypes(
        config.num_classes, dim, config.margin, rng,
        shared_direction=shared, coherence=config.domain_coherence,
    )
    distractor_protos = sample_prototypes(
        config.num_distractors, dim, config.margin, rng, existing=true_protos
    )
    prototypes = dict(zip(true_names, true_protos)) | dict(zip(distractor_names, distractor_protos))

    features: list[np.ndarray] = []
    feature_index: dict[str, int] = {}
    zero = np.zeros(dim)
    per_tag = {
        SplitTag.TRAIN: config.train_per_class,
        SplitTag.VAL: config.val_per_class,
        SplitTag.TEST: config.test_per_class,
    }

    def dataset(name, classnames, shift, tags):
        splits = {
            tag: _make_split(
                name, tag, classnames, per_tag[tag] if tag in tags else 0,
                prototypes, shift, config.noise_scale, rng, features, feature_index,
            )
            for tag in SplitTag
        }
        return DatasetSplits(name, splits[SplitTag.TRAIN], splits[SplitTag.VAL], splits[SplitTag.TEST])

    datasets = {SOURCE_NAME: dataset(SOURCE_NAME, true_names, zero, set(SplitTag))}
    for s in range(config.num_domain_shifts):
        shift = config.domain_shift_scale * rng.standard_normal(dim)
        name = f"{SOURCE_NAME}_shift{s + 1}"
        datasets[name] = dataset(name, true_names, shift, {SplitTag.TEST})
    for x in range(config.num_cross_datasets):
        start = x * config.cross_dataset_classes
        classnames = distractor_names[start : start + config.cross_dataset_classes]
        name = f"{SOURCE_NAME}_xd{x + 1}"
        datasets[name] = dataset(name, classnames, zero, {SplitTag.TEST})

    order = rng.permutation(len(names))
    vocabulary = ClassVocabulary.from_names([names[i] for i in order])

    teacher = _plant_teacher(config, prototypes)
    student = _plant_student(config, prototypes, rng)
    feature_matrix = np.stack(features) if features else np.zeros((0, dim))

    accuracy = _teacher_accuracy(
        teacher,
        feature_matrix,
        feature_index,
        datasets[SOURCE_NAME].test,
        teacher_template,
    )
    if accuracy < 100.0 * config.teacher_accuracy_floor:
        raise GenerationError(
            f"Planted teacher reaches {accuracy:.2f}% < floor "
            f"{100 * config.teacher_accuracy_floor:.0f}%; lower noise_scale or raise margin"
        )
    logger.info(
        f"Generated synthetic world: {config.num_classes} classes, "
        f"{len(datasets)} datasets, vocabulary {vocabulary.size}, "
        f"teacher accuracy {accuracy:.2f}%"
    )
    return SyntheticWorld(
        config=config,
        datasets=datasets,
        features=feature_matrix,
        feature_index=feature_index,
        vocabulary=vocabulary,
        prototypes=prototypes,
        teacher_state=teacher.state_dict(),
        student_state=student.state_dict(),
        teacher_accuracy=accuracy,
    )


def save_synthetic(world: SyntheticWorld, directory: str | Path) -> None:
    """Split files with synthetic:// ids, a feature sidecar, and the planted models."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, splits in world.datasets.items():
        write_splits(splits, directory / f"{name}.json")
    ids = sorted(world.feature_index, key=world.feature_index.get)
    np.save(directory / "features.npy", world.features)
    manifest = {
        "config": asdict(world.config),
        "datasets": list(world.datasets),
        "feature_ids": ids,
        "vocabulary": list(world.vocabulary.names),
        "teacher_accuracy": world.teacher_accuracy,
    }
    (directory / "world.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    save_model(world.build_teacher(), directory / "teacher.pt")
    save_model(world.build_student(), directory / "student.pt")
    logger.info(f"Saved synthetic world to {directory}")


def load_synthetic(directory: str | Path) -> SyntheticWorld:
    directory = Path(directory)
    manifest = json.loads((directory / "world.json").read_text(encoding="utf-8"))
    raw = manifest["config"]
    raw["student_norm_range"] = tuple(raw["student_norm_range"])
    config = SyntheticVLConfig(**raw)
    datasets = {
        name: load_splits(directory / f"{name}.json", name) for name in manifest["datasets"]
    }
    return SyntheticWorld(
        config=config,
        datasets=datasets,
        features=np.load(directory / "features.npy"),
        feature_index={image_id: i for i, image_id in enumerate(manifest["feature_ids"])},
        vocabulary=ClassVocabulary(tuple(manifest["vocabulary"])),
        prototypes={},
        teacher_state=load_model(directory / "teacher.pt").state_dict(),
        student_state=load_model(directory / "student.pt").state_dict(),
        teacher_accuracy=manifest["teacher_accuracy"],
    )
