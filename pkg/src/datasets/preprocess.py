"""Image preprocessing contract shared by every pixel backbone."""

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
from pathlib import Path

import torch
from PIL import Image, UnidentifiedImageError
from torchvision import transforms
from torchvision.transforms import InterpolationMode

from ..utils.errors import DataError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class PreprocessMode(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class PreprocessConfig:
    """Per-backbone input size and normalisation constants."""

    image_size: int = 224
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD


def build_transform(
    mode: PreprocessMode | str, config: PreprocessConfig = PreprocessConfig()
) -> transforms.Compose:
    size = config.image_size
    normalize = transforms.Normalize(config.mean, config.std)
    if PreprocessMode(mode) is PreprocessMode.TRAIN:
        return transforms.Compose(
            [
                transforms.RandomResizedCrop(size, interpolation=InterpolationMode.BICUBIC),
                transforms.RandomHorizontalFlip(),
                transforms.ToTensor(),
                normalize,
            ]
        )
    return transforms.Compose(
        [
            transforms.Resize(size, interpolation=InterpolationMode.BICUBIC),
            transforms.CenterCrop(size),
            transforms.ToTensor(),
            normalize,
        ]
    )


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as image:
            return image.convert("RGB")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DataError(f"Cannot decode image: {e}", str(path))


def preprocess(
    image: Image.Image | str | Path,
    mode: PreprocessMode | str = PreprocessMode.EVAL,
    config: PreprocessConfig = PreprocessConfig(),
    seed: int | None = None,
) -> torch.Tensor:
    """
    Turn an image into a normalised (3, S, S) tensor.

    Train mode draws its crop and flip from torch's RNG; pass `seed` to make a
    single call reproducible without disturbing the global generator.
    """
    if not isinstance(image, Image.Image):
        image = load_image(image)
    transform = build_transform(mode, config)
    if seed is None:
        return transform(image)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return transform(image)
