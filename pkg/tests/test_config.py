from pathlib import Path

import pytest

from src.models.experiment import KLMode, Objective, PromptMethod, ScenarioKind
from src.prompts.loader import TemplateLoader
from src.utils.config import (
    Settings,
    config_from_dict,
    parse_config,
    parse_overrides,
    with_selection_size,
)
from src.utils.errors import ConfigurationError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "data" / "configs"


class TestShippedConfigs:
    @pytest.mark.parametrize(
        "filename", sorted(p.name for p in CONFIG_DIR.glob("*.yaml"))
    )
    def test_parses(self, filename, settings):
        config = parse_config(CONFIG_DIR / filename, settings=settings)
        assert config.seeds == [1, 2, 3]
        assert config.output_dir == str(settings.output_root / config.name)

    def test_coop_kdpl(self, settings):
        config = parse_config(CONFIG_DIR / "coop_kdpl_synthetic.yaml", settings=settings)
        assert config.method is PromptMethod.COOP
        assert config.objective is Objective.KDPL
        assert config.distill.kl_mode is KLMode.SYMMETRIC
        assert config.train.epochs == 50
        assert config.targets == ["synthetic_shift1", "synthetic_shift2"]
        assert config.student_backbone == "planted-student"
        assert config.synthetic.num_classes == 20

    def test_class_agnostic(self, settings):
        config = parse_config(CONFIG_DIR / "ca_kdpl_synthetic.yaml", settings=settings)
        assert config.scenario is ScenarioKind.CLASS_AGNOSTIC
        assert config.num_selected == 50
        assert config.targets == [
            "synthetic_shift1",
            "synthetic_shift2",
            "synthetic_xd1",
            "synthetic_xd2",
        ]

    def test_benchmark_config(self, settings):
        config = parse_config(CONFIG_DIR / "cross_dataset_imagenet.yaml", settings=settings)
        assert config.synthetic is None
        assert len(config.targets) == 10
        assert config.workers == 3
        assert config.prompt.depth == 9


class TestResolution:
    def test_method_defaults(self, settings):
        config = parse_config({"method": "cocoop"}, settings=settings)
        assert config.train.batch_size == 1
        assert config.train.epochs == 10
        assert config.objective is Objective.PLAIN
        assert config.name == "cocoop-plain-synthetic"

    def test_section_beats_flat_keys(self, settings):
        config = parse_config(
            {"method": "maple", "epochs": 7, "maple": {"epochs": 3}}, settings=settings
        )
        assert config.train.epochs == 3
        assert config.train.lr == 0.0035

    def test_vpt_shallow_has_depth_one(self, settings):
        config = parse_config({"method": "vpt_shallow", "vpt": {"depth": 12}}, settings=settings)
        assert config.prompt.depth == 1
        deep = parse_config({"method": "vpt_deep"}, settings=settings)
        assert deep.prompt.depth == 12

    def test_overrides(self, settings):
        config = parse_config(
            CONFIG_DIR / "coop_kdpl_synthetic.yaml",
            ["coop.epochs=3", "seeds=[1]", "tau_student=0.05", "synthetic.num_classes=8"],
            settings,
        )
        assert config.train.epochs == 3
        assert config.seeds == [1]
        assert config.distill.tau_student == 0.05
        assert config.synthetic.num_classes == 8

    def test_templates_default_to_the_shipped_file(self, settings):
        shipped = TemplateLoader().templates
        config = parse_config({}, settings=settings)
        assert config.distill.teacher_template == shipped.teacher
        assert config.distill.student_template == shipped.student
        assert config.prompt.ctx_init == shipped.context_init

    def test_parse_overrides(self):
        assert parse_overrides(["a.b=1", "a.c=x", "d=[1, 2]"]) == {
            "a": {"b": 1, "c": "x"},
            "d": [1, 2],
        }
        with pytest.raises(ConfigurationError):
            parse_overrides(["epochs"])

    def test_round_trip_through_a_dict(self, settings):
        config = parse_config(CONFIG_DIR / "coop_kdpl_synthetic.yaml", settings=settings)
        assert config_from_dict(config.to_dict()) == config

    def test_selection_size_sweep_point(self, settings):
        config = parse_config(CONFIG_DIR / "ca_kdpl_synthetic.yaml", settings=settings)
        point = with_selection_size(config, 20)
        assert point.num_selected == 20
        assert point.name == "coop-ca-kdpl-synthetic-k20"
        assert point.output_dir == str(Path(config.output_dir) / "k20")


class TestRejections:
    @pytest.mark.parametrize(
        "document",
        [
            {"unknown": 1},
            {"coop": {"colour": "red"}},
            {"coop": 3},
            {"method": "prompt-tuning"},
            {"objective": "ca_kdpl"},
            {"method": "vpt_deep", "student_backbone": "toy-rn"},
            {"student_backbone": "toy-vit-h"},
            {"dataset": "imagenet", "student_backbone": "planted-student"},
            {"method": "zeroshot", "objective": "kdpl"},
            {"scenario": "base_to_novel", "objective": "ca_kdpl", "vocabulary_path": "v.txt"},
            {"dtype": "float16"},
            {"tau_student": 0},
            {"student_template": "a photo"},
            {"seeds": []},
            {"coop": {"epochs": 0}},
        ],
    )
    def test_invalid(self, document, settings):
        with pytest.raises(ConfigurationError):
            parse_config(document, settings=settings)

    def test_missing_file(self, settings, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_config(tmp_path / "nope.yaml", settings=settings)

    def test_document_must_be_a_mapping(self, settings, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            parse_config(path, settings=settings)


class TestSettings:
    def test_from_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("KDPL_OUTPUT_ROOT", str(tmp_path / "out"))
        monkeypatch.setenv("LOG_LEVEL", "debug")
        settings = Settings.from_env()
        assert settings.output_root == tmp_path / "out"
        assert settings.log_level == "DEBUG"
