"""Environment settings and YAML experiment configuration."""

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml
from loguru import logger

from ..datasets.registry import backbone_info
from ..models.data import SyntheticVLConfig
from ..models.experiment import (
    DistillationConfig,
    ExperimentConfig,
    KLMode,
    Objective,
    PromptConfig,
    PromptMethod,
    ScenarioKind,
    TrainRunConfig,
)
from ..prompts.loader import TemplateLoader
from .errors import ConfigurationError

SYNTHETIC_VOCABULARY = "synthetic://vocabulary"
DEFAULT_SWEEP = (100, 500, 1000, 2000)


@dataclass(frozen=True)
class Settings:
    """Filesystem roots and logging level read from the environment."""

    data_root: Path
    cache_root: Path
    output_root: Path
    log_dir: Path
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            data_root=Path(os.getenv("KDPL_DATA_ROOT", "data")),
            cache_root=Path(os.getenv("KDPL_CACHE_ROOT", "cache")),
            output_root=Path(os.getenv("KDPL_OUTPUT_ROOT", "outputs")),
            log_dir=Path(os.getenv("KDPL_LOG_DIR", "logs")),
            log_level=os.getenv("LOG_LEVEL", "INFO").upper(),
        )


# Per-method optimisation and prompt-size defaults.
METHOD_DEFAULTS: dict[str, dict[str, Any]] = {
    "zeroshot": {"batch_size": 32, "lr": 0.0, "epochs": 1},
    "coop": {"batch_size": 32, "lr": 0.02, "epochs": 50, "n_ctx": 4},
    "cocoop": {"batch_size": 1, "lr": 0.02, "epochs": 10, "n_ctx": 4},
    "vpt": {"batch_size": 4, "lr": 0.0025, "epochs": 5, "n_visual": 8, "depth": 12},
    "maple": {"batch_size": 4, "lr": 0.0035, "epochs": 5, "n_ctx": 2, "n_visual": 2, "depth": 9},
    "promptsrc": {"batch_size": 4, "lr": 0.0025, "epochs": 20, "n_ctx": 4, "n_visual": 4, "depth": 9},
}

TRAIN_KEYS = {f.name for f in fields(TrainRunConfig)} - {"seed"}
PROMPT_KEYS = {f.name for f in fields(PromptConfig)} - {"method"}
DISTILL_KEYS = {f.name for f in fields(DistillationConfig)}
SYNTHETIC_KEYS = {f.name for f in fields(SyntheticVLConfig)}
EXPERIMENT_KEYS = {
    "name",
    "method",
    "objective",
    "student_backbone",
    "teacher_backbone",
    "dataset",
    "scenario",
    "targets",
    "shots",
    "num_selected",
    "seeds",
    "vocabulary_path",
    "output_dir",
    "cache_dir",
    "eval_batch_size",
    "workers",
    "dtype",
    "baseline",
}
FLAT_KEYS = EXPERIMENT_KEYS | TRAIN_KEYS | PROMPT_KEYS | DISTILL_KEYS
SECTION_KEYS = TRAIN_KEYS | PROMPT_KEYS | DISTILL_KEYS


def method_section(method: PromptMethod) -> str:
    """Name of the YAML section holding a method's settings."""
    if method in (PromptMethod.VPT_SHALLOW, PromptMethod.VPT_DEEP):
        return "vpt"
    return method.value


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """`key=value` flags to a nested dict; values are parsed as YAML scalars."""
    overrides: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"Override '{pair}' is not of the form key=value")
        value = yaml.safe_load(raw) if raw.strip() else ""
        parts = key.strip().split(".")
        node = overrides
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"Override '{pair}' conflicts with a flat key")
        node[parts[-1]] = value
    return overrides


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _pick(values: dict, keys: set[str]) -> dict:
    return {k: v for k, v in values.items() if k in keys}


def _enum(cls, value, key: str):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(member.value for member in cls)
        raise ConfigurationError(f"Invalid {key} '{value}'; choose one of: {choices}")


def _build(cls, values: dict):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid {cls.__name__} settings: {e}")


def load_yaml(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            document = yaml.safe_load(f) or {}
    except FileNotFoundError:
        logger.error(f"Config file not found: {path}")
        raise
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML in {path}: {e}")
    if not isinstance(document, dict):
        raise ConfigurationError(f"{path} must hold a mapping of settings")
    return document


def parse_config(
    document: dict | str | Path | None = None,
    overrides: list[str] | dict | None = None,
    settings: Settings | None = None,
) -> ExperimentConfig:
    """
    Resolve a config document and flag overrides into an ExperimentConfig.

    Precedence, lowest first: dataclass defaults, the shipped templates
    (data/templates.json), per-method defaults, flat keys, the method's own
    section. Overrides are merged into the document
    before resolution; dotted keys address sections.

    Raises:
        ConfigurationError: For unknown keys, bad values, or invalid combinations
    """
    settings = settings or Settings.from_env()
    if document is None:
        raw: dict = {}
    elif isinstance(document, dict):
        raw = dict(document)
    else:
        raw = load_yaml(document)
    if isinstance(overrides, list):
        overrides = parse_overrides(overrides)
    raw = _merge(raw, overrides or {})

    method = _enum(PromptMethod, raw.get("method", PromptMethod.COOP), "method")
    sections = {m.value for m in PromptMethod} | {"vpt", "synthetic"}
    for key, value in raw.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ConfigurationError(f"Section '{key}' must be a mapping")
            allowed = SYNTHETIC_KEYS if key == "synthetic" else SECTION_KEYS
            unknown = set(value) - allowed
            if unknown:
                raise ConfigurationError(f"Unknown keys in section '{key}': {sorted(unknown)}")
        elif key not in FLAT_KEYS:
            raise ConfigurationError(f"Unknown config key: '{key}'")

    shipped = TemplateLoader().templates
    values = {
        "teacher_template": shipped.teacher,
        "student_template": shipped.student,
        "ctx_init": shipped.context_init,
        **METHOD_DEFAULTS[method_section(method)],
        **{k: v for k, v in raw.items() if k in FLAT_KEYS},
        **raw.get(method_section(method), {}),
    }
    if method is PromptMethod.VPT_SHALLOW:
        values["depth"] = 1

    train = _build(TrainRunConfig, _pick(values, TRAIN_KEYS))
    prompt = _build(PromptConfig, {**_pick(values, PROMPT_KEYS), "method": method})
    distill_values = _pick(values, DISTILL_KEYS)
    if "kl_mode" in distill_values:
        distill_values["kl_mode"] = _enum(KLMode, distill_values["kl_mode"], "kl_mode")
    distill = _build(DistillationConfig, distill_values)

    dataset = str(values.get("dataset", "synthetic"))
    synthetic = None
    if dataset == "synthetic" or dataset.startswith("synthetic_"):
        section = dict(raw.get("synthetic", {}))
        if "student_norm_range" in section:
            section["student_norm_range"] = tuple(section["student_norm_range"])
        synthetic = _build(SyntheticVLConfig, section)

    scenario = _enum(
        ScenarioKind, values.get("scenario", ScenarioKind.DOMAIN_GENERALIZATION), "scenario"
    )
    objective = _enum(Objective, values.get("objective", Objective.PLAIN), "objective")
    targets = list(values.get("targets") or default_targets(scenario, dataset, synthetic))
    seeds = [int(s) for s in values.get("seeds", [1, 2, 3])]
    name = str(values.get("name") or f"{method.value}-{objective.value}-{dataset}")

    config = ExperimentConfig(
        name=name,
        method=method,
        objective=objective,
        student_backbone=str(
            values.get("student_backbone", "planted-student" if synthetic else "toy-vit-b")
        ),
        teacher_backbone=str(
            values.get("teacher_backbone", "planted-teacher" if synthetic else "toy-vit-h")
        ),
        dataset=dataset,
        scenario=scenario,
        targets=targets,
        shots=int(values.get("shots", 16)),
        num_selected=int(values.get("num_selected", 1000)),
        seeds=seeds,
        train=train,
        prompt=prompt,
        distill=distill,
        synthetic=synthetic,
        vocabulary_path=values.get("vocabulary_path"),
        output_dir=str(values.get("output_dir", settings.output_root / name)),
        cache_dir=str(values.get("cache_dir", settings.cache_root)),
        eval_batch_size=int(values.get("eval_batch_size", 256)),
        workers=int(values.get("workers", 1)),
        dtype=str(values.get("dtype", "float32")),
        baseline=bool(values.get("baseline", True)),
    )
    validate_config(config)
    return config


def default_targets(
    scenario: ScenarioKind, dataset: str, synthetic: SyntheticVLConfig | None
) -> list[str]:
    """Synthetic worlds supply their own targets; benchmarks must name theirs."""
    if scenario is ScenarioKind.BASE_TO_NOVEL:
        return [dataset]
    if synthetic is None:
        return []
    shifts = [f"synthetic_shift{i + 1}" for i in range(synthetic.num_domain_shifts)]
    crosses = [f"synthetic_xd{i + 1}" for i in range(synthetic.num_cross_datasets)]
    match scenario:
        case ScenarioKind.DOMAIN_GENERALIZATION:
            return shifts
        case ScenarioKind.CROSS_DATASET:
            return crosses
        case _:
            return shifts + crosses


def validate_config(config: ExperimentConfig) -> None:
    """Reject combinations that are invalid before any model is built."""
    student = backbone_info(config.student_backbone)
    teacher = backbone_info(config.teacher_backbone)
    if student.role.value != "student":
        raise ConfigurationError(f"'{config.student_backbone}' is not a student backbone")
    if teacher.role.value != "teacher":
        raise ConfigurationError(f"'{config.teacher_backbone}' is not a teacher backbone")
    if config.method.injects_visual and not student.is_vit:
        raise ConfigurationError(
            f"{config.method} injects visual prompts, but '{config.student_backbone}' "
            "has no ViT image encoder"
        )
    planted = {"planted-student", "planted-teacher"}
    if config.synthetic is None and {config.student_backbone, config.teacher_backbone} & planted:
        raise ConfigurationError("Planted backbones only exist for synthetic datasets")
    if config.objective.uses_vocabulary and not config.vocabulary_path:
        raise ConfigurationError(f"Objective {config.objective} requires vocabulary_path")
    if config.vocabulary_path == SYNTHETIC_VOCABULARY and config.synthetic is None:
        raise ConfigurationError("The synthetic vocabulary needs a synthetic dataset")
    if config.method is PromptMethod.ZEROSHOT and config.objective is not Objective.PLAIN:
        raise ConfigurationError("The zero-shot baseline trains nothing; use objective plain")
    if config.scenario is ScenarioKind.BASE_TO_NOVEL and config.objective.uses_vocabulary:
        raise ConfigurationError("base_to_novel trains on named base classes only")
    if config.shots < 1 or config.num_selected < 1 or config.workers < 1:
        raise ConfigurationError("shots, num_selected and workers must be >= 1")
    if not config.seeds:
        raise ConfigurationError("At least one seed is required")
    if config.dtype not in ("float32", "float64"):
        raise ConfigurationError(f"Unsupported dtype: {config.dtype}")


def config_from_dict(resolved: dict) -> ExperimentConfig:
    """Rebuild a resolved config, e.g. from a run manifest."""
    data = dict(resolved)
    data["method"] = PromptMethod(data["method"])
    data["objective"] = Objective(data["objective"])
    data["scenario"] = ScenarioKind(data["scenario"])
    data["train"] = TrainRunConfig(**data["train"])
    data["prompt"] = PromptConfig(**{**data["prompt"], "method": data["method"]})
    distill = dict(data["distill"])
    distill["kl_mode"] = KLMode(distill["kl_mode"])
    data["distill"] = DistillationConfig(**distill)
    if data.get("synthetic") is not None:
        synthetic = dict(data["synthetic"])
        synthetic["student_norm_range"] = tuple(synthetic["student_norm_range"])
        data["synthetic"] = SyntheticVLConfig(**synthetic)
    return ExperimentConfig(**data)


def with_selection_size(config: ExperimentConfig, k: int) -> ExperimentConfig:
    """Copy of `config` for one point of a K sweep, writing to its own directory."""
    return replace(
        config,
        num_selected=k,
        name=f"{config.name}-k{k}",
        output_dir=str(Path(config.output_dir) / f"k{k}"),
    )
