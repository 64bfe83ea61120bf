import json

import pytest

from src.datasets.splits import (
    base_novel_split,
    load_split,
    load_splits,
    sample_few_shot,
    write_splits,
)
from src.models.data import DatasetItem, DatasetSplit, DatasetSplits, SplitTag
from src.models.vlm import ClassSet
from src.utils.errors import ContractViolation, SplitParseError

CLASSNAMES = ("cat", "dog", "BACKGROUND_Google")


def _records(count_per_class: int) -> list[list]:
    return [
        [f"{name}/{i:03d}.jpg", label, name]
        for label, name in enumerate(CLASSNAMES)
        for i in range(count_per_class)
    ]


@pytest.fixture
def split_file(tmp_path):
    path = tmp_path / "split_toy.json"
    path.write_text(
        json.dumps({"train": _records(5), "val": _records(1), "test": _records(2)}),
        encoding="utf-8",
    )
    return path


class TestLoadSplits:
    def test_triple(self, split_file):
        splits = load_splits(split_file)
        assert splits.name == "split_toy"
        assert splits.counts() == {"train": 15, "val": 3, "test": 6}
        assert splits.classnames == CLASSNAMES
        assert splits.train.items[5] == DatasetItem("dog/000.jpg", 1, "dog")
        assert load_split(split_file, "val").tag is SplitTag.VAL

    def test_discarded_classes_are_compacted(self, split_file):
        splits = load_splits(split_file, "toy", discard=("BACKGROUND_Google",))
        assert splits.classnames == ("cat", "dog")
        assert splits.counts() == {"train": 10, "val": 2, "test": 4}
        assert {item.label for item in splits.test.items} == {0, 1}

    def test_malformed_record_reports_its_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(
            "{\n"
            '  "train": [\n'
            '    ["a.jpg", 0, "cat"],\n'
            '    ["b.jpg", "one", "dog"]\n'
            "  ],\n"
            '  "val": [],\n'
            '  "test": []\n'
            "}\n",
            encoding="utf-8",
        )
        with pytest.raises(SplitParseError) as info:
            load_splits(path)
        assert info.value.line == 4
        assert isinstance(info.value, ValueError)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "train": [,\n}', encoding="utf-8")
        with pytest.raises(SplitParseError) as info:
            load_splits(path)
        assert info.value.line == 2

    def test_conflicting_names_for_a_label(self, tmp_path):
        path = tmp_path / "conflict.json"
        path.write_text(
            json.dumps({"train": [["a", 0, "cat"], ["b", 0, "dog"]], "val": [], "test": []}),
            encoding="utf-8",
        )
        with pytest.raises(SplitParseError):
            load_splits(path)

    def test_written_file_loads_back(self, split_file, tmp_path):
        splits = load_splits(split_file, "toy")
        out = tmp_path / "nested" / "copy.json"
        write_splits(splits, out)
        again = load_splits(out, "toy")
        assert again == splits
        assert len(out.read_text().splitlines()) > splits.counts()["train"]


class TestFewShot:
    def test_at_most_k_per_class(self, split_file):
        train = load_splits(split_file).train
        episode = sample_few_shot(train, 2, seed=1)
        assert episode.class_counts() == {0: 2, 1: 2, 2: 2}
        assert episode.shots == 2 and episode.seed == 1

    def test_same_seed_same_episode(self, split_file):
        train = load_splits(split_file).train
        assert sample_few_shot(train, 3, 7).items == sample_few_shot(train, 3, 7).items

    def test_small_classes_keep_everything(self, split_file):
        train = load_splits(split_file).train
        episode = sample_few_shot(train, 16, seed=1)
        assert len(episode) == len(train)

    def test_only_train_split(self, split_file):
        splits = load_splits(split_file)
        with pytest.raises(ContractViolation):
            sample_few_shot(splits.test, 2, 1)
        with pytest.raises(ContractViolation):
            sample_few_shot(splits.train, 0, 1)


class TestBaseNovel:
    def test_odd_class_count_rounds_base_up(self):
        base, novel = base_novel_split(["a", "b", "c", "d", "e"])
        assert base == ClassSet(("a", "b", "c"))
        assert novel == ClassSet(("d", "e"))

    def test_restricted_split_is_relabelled(self):
        split = DatasetSplit(
            [DatasetItem("x", 0, "a"), DatasetItem("y", 3, "d")], ("a", "b", "c", "d"), SplitTag.TEST
        )
        _, novel = base_novel_split(ClassSet(split.classnames))
        restricted = split.restricted_to(novel)
        assert restricted.items == [DatasetItem("y", 1, "d")]

    def test_needs_two_classes(self):
        with pytest.raises(ContractViolation):
            base_novel_split(["only"])

    def test_splits_are_value_objects(self):
        empty = DatasetSplit([], ("a", "b"), SplitTag.TRAIN)
        splits = DatasetSplits("toy", empty, empty, DatasetSplit([], ("a", "b"), SplitTag.TEST))
        assert not splits.train_enabled
