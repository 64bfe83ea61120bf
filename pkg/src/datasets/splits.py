"""Split files in the train/val/test triple convention, episodes, and base/novel splits."""

import json
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
import yaml
from loguru import logger

from ..models.data import DatasetItem, DatasetSplit, DatasetSplits, FewShotEpisode, SplitTag
from ..models.vlm import ClassSet
from ..utils.errors import ContractViolation, SplitParseError


def _record_lines(text: str) -> dict[tuple[str, int], int]:
    """1-based line of every record, read from the YAML node marks of the JSON text."""
    lines: dict[tuple[str, int], int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        if isinstance(value_node, yaml.SequenceNode):
            for i, record in enumerate(value_node.value):
                lines[(key_node.value, i)] = record.start_mark.line + 1
    return lines


def _parse_records(
    raw: object, tag: str, locate
) -> list[tuple[str, int, str]]:
    if not isinstance(raw, list):
        raise SplitParseError(f"'{tag}' must be an array of records", locate(tag, 0))
    records = []
    for i, record in enumerate(raw):
        if (
            not isinstance(record, list)
            or len(record) != 3
            or not isinstance(record[0], str)
            or isinstance(record[1], bool)
            or not isinstance(record[1], int)
            or not isinstance(record[2], str)
        ):
            raise SplitParseError(
                f"{tag} record {i} must be [path, integer label, class name]",
                locate(tag, i),
            )
        records.append((record[0], record[1], record[2]))
    return records


def load_splits(
    path: str | Path, name: str | None = None, discard: Iterable[str] = ()
) -> DatasetSplits:
    """
    Parse a split file into its train/val/test triple.

    Args:
        path: JSON document with "train", "val" and "test" arrays of
            [path, label, classname] records and an optional "classnames" array
        name: Dataset name (defaults to the file stem)
        discard: Class names dropped on load; remaining labels are compacted

    Raises:
        SplitParseError: For malformed records, carrying the 1-based line number
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SplitParseError(f"Invalid JSON in {path}: {e.msg}", e.lineno)
    if not isinstance(document, dict):
        raise SplitParseError(f"{path} must hold an object with train/val/test arrays", 1)

    lines = None

    def locate(tag: str, index: int) -> int | None:
        nonlocal lines
        if lines is None:
            lines = _record_lines(text)
        return lines.get((tag, index))

    parsed = {
        tag.value: _parse_records(document.get(tag.value, []), tag.value, locate)
        for tag in SplitTag
    }

    if "classnames" in document:
        classnames = list(document["classnames"])
    else:
        by_label: dict[int, str] = {}
        for tag, records in parsed.items():
            for i, (_, label, classname) in enumerate(records):
                if label < 0:
                    raise SplitParseError(f"Negative label {label}", locate(tag, i))
                if by_label.setdefault(label, classname) != classname:
                    raise SplitParseError(
                        f"Label {label} is both '{by_label[label]}' and '{classname}'",
                        locate(tag, i),
                    )
        size = max(by_label, default=-1) + 1
        if len(by_label) != size:
            raise SplitParseError(f"Labels in {path} are not contiguous from 0")
        classnames = [by_label[i] for i in range(size)]

    for tag, records in parsed.items():
        for i, (_, label, classname) in enumerate(records):
            if not 0 <= label < len(classnames):
                raise SplitParseError(
                    f"Label {label} outside {len(classnames)} classes", locate(tag, i)
                )
            if classnames[label] != classname:
                raise SplitParseError(
                    f"Label {label} is '{classnames[label]}', record says '{classname}'",
                    locate(tag, i),
                )

    dropped = set(discard) & set(classnames)
    kept = tuple(c for c in classnames if c not in dropped)
    position = {c: i for i, c in enumerate(kept)}
    splits = {
        tag: DatasetSplit(
            [
                DatasetItem(impath, position[classname], classname)
                for impath, _, classname in parsed[tag.value]
                if classname in position
            ],
            kept,
            tag,
        )
        for tag in SplitTag
    }
    result = DatasetSplits(
        name or path.stem, splits[SplitTag.TRAIN], splits[SplitTag.VAL], splits[SplitTag.TEST]
    )
    if dropped:
        logger.info(f"Discarded classes {sorted(dropped)} from {result.name}")
    logger.info(f"Loaded split {result.name}: {result.counts()} over {len(kept)} classes")
    return result


def load_split(path: str | Path, tag: SplitTag | str = SplitTag.TEST) -> DatasetSplit:
    return load_splits(path).split(tag)


def write_splits(splits: DatasetSplits, path: str | Path) -> None:
    """Write a split file with one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [f'  "classnames": {json.dumps(list(splits.classnames), ensure_ascii=False)}']
    for tag in SplitTag:
        records = [
            "    " + json.dumps([item.impath, item.label, item.classname], ensure_ascii=False)
            for item in splits.split(tag).items
        ]
        body = "[\n" + ",\n".join(records) + "\n  ]" if records else "[]"
        parts.append(f'  "{tag.value}": {body}')
    path.write_text("{\n" + ",\n".join(parts) + "\n}\n", encoding="utf-8")
    logger.debug(f"Wrote split file {path}")


def sample_few_shot(split: DatasetSplit, shots: int, seed: int) -> FewShotEpisode:
    """At most `shots` items per class, chosen by a generator seeded with `seed`."""
    if split.tag is not SplitTag.TRAIN:
        raise ContractViolation(f"Few-shot episodes are drawn from train, not {split.tag}")
    if shots < 1:
        raise ContractViolation("shots must be >= 1")
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[int]] = {}
    for index, item in enumerate(split.items):
        by_label.setdefault(item.label, []).append(index)
    chosen: list[int] = []
    for label in sorted(by_label):
        indices = by_label[label]
        if len(indices) <= shots:
            chosen.extend(indices)
        else:
            chosen.extend(rng.choice(indices, size=shots, replace=False).tolist())
    items = [split.items[i] for i in sorted(chosen)]
    return FewShotEpisode(items, split.classnames, shots, seed)


def base_novel_split(classnames: Sequence[str] | ClassSet) -> tuple[ClassSet, ClassSet]:
    """Base = first ceil(C/2) names in canonical order, novel = the rest."""
    names = tuple(classnames.names if isinstance(classnames, ClassSet) else classnames)
    if len(names) < 2:
        raise ContractViolation("A base/novel split needs at least 2 classes")
    cut = math.ceil(len(names) / 2)
    return ClassSet(names[:cut]), ClassSet(names[cut:])
