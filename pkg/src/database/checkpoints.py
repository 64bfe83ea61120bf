"""Self-describing model and prompt checkpoints."""

from dataclasses import asdict
from enum import Enum
from pathlib import Path

import torch
from loguru import logger

from .. import __version__
from ..components.prompt_learners import PromptLearner
from ..components.vlm_core import ToyDualEncoder
from ..models.vlm import EncoderConfig, ModelRole
from ..utils.errors import ContractViolation

MODEL_FORMAT = "kdpl-model"
PROMPT_FORMAT = "kdpl-prompt"


def _plain(value):
    """Enums and tuples flattened so checkpoints load with weights_only=True."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _load(path: Path, expected_format: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != expected_format:
        raise ContractViolation(f"{path} is not a {expected_format} checkpoint")
    return payload


def save_model(model: ToyDualEncoder, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": MODEL_FORMAT,
            "version": __version__,
            "role": model.role.value,
            "dtype": str(model.dtype).removeprefix("torch."),
            "config": _plain(asdict(model.config)),
            "state_dict": model.state_dict(),
        },
        path,
    )
    logger.debug(f"Saved {model.role} model to {path}")


def load_model(path: str | Path) -> ToyDualEncoder:
    payload = _load(Path(path), MODEL_FORMAT)
    config = EncoderConfig(**payload["config"])
    model = ToyDualEncoder(
        config,
        ModelRole(payload["role"]),
        dtype=getattr(torch, payload.get("dtype", "float32")),
    )
    model.load_state_dict(payload["state_dict"])
    return model


def save_prompt(learner: PromptLearner, path: str | Path, init: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": PROMPT_FORMAT,
            "version": __version__,
            "method": learner.method.value,
            "prompt_config": _plain(asdict(learner.config)),
            "init": _plain(init or {}),
            "state_dict": learner.state_dict(),
        },
        path,
    )
    logger.debug(f"Saved {learner.method} prompt to {path}")


def load_prompt(learner: PromptLearner, path: str | Path) -> dict:
    """Load gamma into `learner`; returns the stored init metadata."""
    payload = _load(Path(path), PROMPT_FORMAT)
    if payload["method"] != learner.method.value:
        raise ContractViolation(
            f"{path} holds a {payload['method']} prompt, not {learner.method}"
        )
    learner.load_state_dict(payload["state_dict"])
    return payload["init"]
