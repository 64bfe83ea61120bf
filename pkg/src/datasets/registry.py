"""Dataset and backbone registries, image sources, and seeded loaders."""

from dataclasses import dataclass, replace
from pathlib import Path

import torch
from loguru import logger
from torch.utils.data import DataLoader, Dataset

from ..components.vlm_core import ToyDualEncoder
from ..models.data import DatasetItem, DatasetSplit, DatasetSplits, FewShotEpisode
from ..models.vlm import EncoderConfig, ModelRole
from ..utils.errors import ConfigurationError, ContractViolation, DataError
from .preprocess import PreprocessConfig, PreprocessMode, preprocess
from .splits import load_splits
from .synthetic import SOURCE_NAME, SyntheticWorld


@dataclass
class Batch:
    """Student inputs, clean teacher inputs, stable ids, and (optional) labels."""

    images: torch.Tensor
    teacher_images: torch.Tensor
    image_ids: list[str]
    labels: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.image_ids)

    def require_labels(self) -> torch.Tensor:
        if self.labels is None:
            raise ContractViolation("This objective needs ground-truth labels")
        return self.labels

    def without_labels(self) -> "Batch":
        return replace(self, labels=None)


# -- benchmarks -------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkInfo:
    name: str
    image_dir: str
    split_file: str
    discard: tuple[str, ...] = ()
    note: str = ""


BENCHMARKS: dict[str, BenchmarkInfo] = {
    info.name: info
    for info in (
        BenchmarkInfo("imagenet", "imagenet/images", "imagenet/split_imagenet.json"),
        BenchmarkInfo(
            "caltech101",
            "caltech-101/101_ObjectCategories",
            "caltech-101/split_zhou_Caltech101.json",
            discard=("BACKGROUND_Google", "Faces_easy"),
        ),
        BenchmarkInfo("oxford_pets", "oxford_pets/images", "oxford_pets/split_zhou_OxfordPets.json"),
        BenchmarkInfo("stanford_cars", "stanford_cars", "stanford_cars/split_zhou_StanfordCars.json"),
        BenchmarkInfo(
            "oxford_flowers", "oxford_flowers/jpg", "oxford_flowers/split_zhou_OxfordFlowers.json"
        ),
        BenchmarkInfo("food101", "food-101/images", "food-101/split_zhou_Food101.json"),
        BenchmarkInfo(
            "fgvc_aircraft", "fgvc_aircraft/images", "fgvc_aircraft/split_fgvc_aircraft.json"
        ),
        BenchmarkInfo("sun397", "sun397/SUN397", "sun397/split_zhou_SUN397.json"),
        BenchmarkInfo("dtd", "dtd/images", "dtd/split_zhou_DescribableTextures.json"),
        BenchmarkInfo("eurosat", "eurosat/2750", "eurosat/split_zhou_EuroSAT.json"),
        BenchmarkInfo(
            "ucf101",
            "ucf101/UCF-101-midframes",
            "ucf101/split_zhou_UCF101.json",
            note="one image per video: the middle frame",
        ),
        BenchmarkInfo("imagenetv2", "imagenetv2/images", "imagenetv2/split_imagenetv2.json"),
        BenchmarkInfo(
            "imagenet_sketch", "imagenet-sketch/images", "imagenet-sketch/split_imagenet_sketch.json"
        ),
        BenchmarkInfo("imagenet_a", "imagenet-adversarial/images", "imagenet-adversarial/split_imagenet_a.json"),
        BenchmarkInfo("imagenet_r", "imagenet-rendition/images", "imagenet-rendition/split_imagenet_r.json"),
    )
}


def is_synthetic(name: str) -> bool:
    return name == SOURCE_NAME or name.startswith(f"{SOURCE_NAME}_")


# -- image sources ----------------------------------------------------------


class FeatureSource:
    """Synthetic feature vectors; preprocessing is bypassed."""

    def __init__(self, world: SyntheticWorld) -> None:
        self.world = world

    def load(self, item: DatasetItem, mode: PreprocessMode) -> torch.Tensor:
        try:
            row = self.world.feature_index[item.impath]
        except KeyError:
            raise DataError("Unknown synthetic id", item.impath)
        return torch.from_numpy(self.world.features[row]).to(torch.float32)


class FileSource:
    """Images decoded from disk and preprocessed for a pixel backbone."""

    def __init__(self, image_root: Path, config: PreprocessConfig = PreprocessConfig()) -> None:
        self.image_root = Path(image_root)
        self.config = config

    def load(self, item: DatasetItem, mode: PreprocessMode) -> torch.Tensor:
        return preprocess(self.image_root / item.impath, mode, self.config)


class SplitDataset(Dataset):
    """
    Torch view of a split or episode.

    Every item yields the student input (augmented in train mode), the
    teacher input (always eval-mode so cached predictions stay valid), its id,
    and its label.
    """

    def __init__(
        self,
        items: list[DatasetItem],
        source: FeatureSource | FileSource,
        mode: PreprocessMode | str = PreprocessMode.EVAL,
    ) -> None:
        self.items = list(items)
        self.source = source
        self.mode = PreprocessMode(mode)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor, str, int]:
        item = self.items[index]
        student = self.source.load(item, self.mode)
        if self.mode is PreprocessMode.EVAL or isinstance(self.source, FeatureSource):
            teacher = student
        else:
            teacher = self.source.load(item, PreprocessMode.EVAL)
        return student, teacher, item.impath, item.label


def collate_batch(samples: list[tuple[torch.Tensor, torch.Tensor, str, int]]) -> Batch:
    images, teacher_images, ids, labels = zip(*samples)
    return Batch(
        images=torch.stack(images),
        teacher_images=torch.stack(teacher_images),
        image_ids=list(ids),
        labels=torch.tensor(labels, dtype=torch.long),
    )


def make_loader(
    split: DatasetSplit | FewShotEpisode,
    source: FeatureSource | FileSource,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    mode: PreprocessMode | str = PreprocessMode.EVAL,
) -> DataLoader:
    """Single-process loader whose shuffling order is fixed by `seed`."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        SplitDataset(split.items, source, mode),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=collate_batch,
        num_workers=0,
    )


class DatasetProvider:
    """Resolves dataset ids to splits and image sources."""

    def __init__(
        self,
        data_root: str | Path,
        world: SyntheticWorld | None = None,
        preprocess_config: PreprocessConfig = PreprocessConfig(),
    ) -> None:
        self.data_root = Path(data_root)
        self.world = world
        self.preprocess_config = preprocess_config

    def _require_world(self, name: str) -> SyntheticWorld:
        if self.world is None:
            raise ConfigurationError(f"Dataset '{name}' needs a synthetic world")
        return self.world

    def load(self, name: str) -> DatasetSplits:
        """
        Raises:
            DataError: If the dataset's split file is missing
            ConfigurationError: If the dataset id is unknown
        """
        if is_synthetic(name):
            world = self._require_world(name)
            if name not in world.datasets:
                raise DataError("Synthetic world has no such dataset", name)
            return world.datasets[name]
        info = BENCHMARKS.get(name)
        if info is None:
            raise ConfigurationError(
                f"Unknown dataset '{name}'. Known: {sorted(BENCHMARKS)} or synthetic"
            )
        path = self.data_root / info.split_file
        if not path.exists():
            raise DataError("Split file not found", str(path))
        return load_splits(path, info.name, info.discard)

    def source(self, name: str) -> FeatureSource | FileSource:
        if is_synthetic(name):
            return FeatureSource(self._require_world(name))
        return FileSource(self.data_root / BENCHMARKS[name].image_dir, self.preprocess_config)


# -- backbones --------------------------------------------------------------


@dataclass(frozen=True)
class BackboneInfo:
    name: str
    role: ModelRole
    config: EncoderConfig | None = None  # None: taken from the synthetic world
    seed: int = 0

    @property
    def is_vit(self) -> bool:
        return self.config is None or self.config.is_vit


BACKBONES: dict[str, BackboneInfo] = {
    info.name: info
    for info in (
        BackboneInfo("toy-vit-b", ModelRole.STUDENT, EncoderConfig(num_layers=2), seed=11),
        BackboneInfo(
            "toy-rn", ModelRole.STUDENT, EncoderConfig(num_layers=2, image_arch="mlp"), seed=12
        ),
        BackboneInfo("toy-vit-l", ModelRole.TEACHER, EncoderConfig(num_layers=4), seed=21),
        BackboneInfo("toy-vit-h", ModelRole.TEACHER, EncoderConfig(num_layers=6), seed=22),
        BackboneInfo("planted-student", ModelRole.STUDENT),
        BackboneInfo("planted-teacher", ModelRole.TEACHER),
    )
}


def backbone_info(name: str) -> BackboneInfo:
    try:
        return BACKBONES[name]
    except KeyError:
        raise ConfigurationError(f"Unknown backbone '{name}'. Known: {sorted(BACKBONES)}")


def build_backbone(
    name: str,
    world: SyntheticWorld | None = None,
    dtype: torch.dtype = torch.float32,
) -> ToyDualEncoder:
    """
    Instantiate a registered backbone.

    Toy backbones read feature vectors instead of pixels when a synthetic
    world is given, so they can run on synthetic datasets too.
    """
    info = backbone_info(name)
    if info.config is None:
        if world is None:
            raise ConfigurationError(f"Backbone '{name}' needs a synthetic world")
        if info.role is ModelRole.TEACHER:
            return world.build_teacher(dtype)
        return world.build_student(dtype)

    config = info.config
    if world is not None:
        config = replace(
            config,
            input_kind="features",
            feature_dim=world.config.embedding_dim,
            num_patches=1,
        )
    model = ToyDualEncoder(config, info.role, seed=info.seed, dtype=dtype)
    logger.debug(f"Built backbone {name} ({info.role}, {config.num_layers} layers)")
    return model
