"""Prompt template and class vocabulary loading utilities."""

import json
from dataclasses import dataclass
from pathlib import Path

from loguru import logger

from ..components.vlm_core import CLASS_PLACEHOLDER
from ..models.vlm import ClassVocabulary
from ..utils.errors import ConfigurationError

DEFAULT_TEMPLATES_FILE = Path(__file__).resolve().parents[2] / "data" / "templates.json"


@dataclass(frozen=True)
class TemplateSet:
    """Hand-crafted text used by the teacher, the student, and PromptSRC."""

    teacher: str
    student: str
    context_init: str
    bank: tuple[str, ...]


class TemplateLoader:
    """Loads the hand-crafted templates from a JSON file."""

    def __init__(self, templates_file: str | Path = DEFAULT_TEMPLATES_FILE) -> None:
        """
        Initialize the template loader.

        Args:
            templates_file: Path to the JSON file holding teacher, student,
                context_init and bank entries
        """
        self.templates_file = Path(templates_file)
        self._templates = self._load_templates()

    def _load_templates(self) -> TemplateSet:
        try:
            with open(self.templates_file, encoding="utf-8") as f:
                data = json.load(f)
            templates = TemplateSet(
                teacher=data["teacher"],
                student=data["student"],
                context_init=data["context_init"],
                bank=tuple(data["bank"]),
            )
        except FileNotFoundError:
            logger.error(f"Templates file not found: {self.templates_file}")
            raise
        except json.JSONDecodeError as e:
            logger.error(f"Invalid JSON in templates file: {e}")
            raise
        except KeyError as e:
            logger.error(f"Missing required field in templates data: {e}")
            raise

        for template in (templates.teacher, templates.student, *templates.bank):
            if template.count(CLASS_PLACEHOLDER) != 1:
                raise ConfigurationError(
                    f"Template '{template}' must contain exactly one '{CLASS_PLACEHOLDER}'"
                )
        logger.debug(
            f"Loaded templates from {self.templates_file} ({len(templates.bank)} bank entries)"
        )
        return templates

    @property
    def templates(self) -> TemplateSet:
        return self._templates

    @property
    def bank(self) -> tuple[str, ...]:
        return self._templates.bank


def load_vocabulary(path: str | Path) -> ClassVocabulary:
    """
    Read one class name per line; blank lines and `#` comments are ignored.

    Names are normalized and de-duplicated, keeping first occurrences.
    """
    path = Path(path)
    try:
        vocabulary = ClassVocabulary.from_file(path)
    except FileNotFoundError:
        logger.error(f"Vocabulary file not found: {path}")
        raise
    logger.info(f"Loaded vocabulary of {vocabulary.size} class names from {path}")
    return vocabulary


def save_vocabulary(vocabulary: ClassVocabulary, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(vocabulary.names) + "\n", encoding="utf-8")
