"""Config-driven experiment runner: train per seed, evaluate, persist, resume."""

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from loguru import logger

from .. import __version__
from ..database.checkpoints import load_prompt, save_prompt
from ..database.results_db import read_rows, write_results, write_rows, write_summary
from ..database.teacher_cache import TeacherPredictionCache
from ..datasets.registry import DatasetProvider, build_backbone, make_loader
from ..datasets.splits import sample_few_shot
from ..datasets.synthetic import SyntheticWorld, generate_synthetic, save_synthetic
from ..evaluators.metrics import BASELINE_LABEL, aggregate_rows
from ..evaluators.plots import emit_comparison_plot
from ..evaluators.scenarios import ScenarioEvaluator, build_scenario_evaluator
from ..models.data import FewShotEpisode
from ..models.experiment import (
    ExperimentConfig,
    MetricsRow,
    MetricsTable,
    Objective,
    PromptConfig,
    PromptMethod,
    RunManifest,
    ScenarioSpec,
)
from ..models.vlm import ClassVocabulary
from ..prompts.loader import TemplateLoader, load_vocabulary
from ..utils.config import SYNTHETIC_VOCABULARY, Settings, config_from_dict
from ..utils.errors import KDPLError, ResumeError
from ..utils.logger import log_run_event
from .distillation import DistillationTeacher
from .prompt_learners import build_prompt_learner
from .student import PromptedStudent
from .trainer import PromptTrainer, seed_everything

MANIFEST = "manifest.json"
RUN_STATS = "run_stats.json"
RESULTS = "results.csv"
SUMMARY = "summary.md"
PLOT = "comparison.png"
PROMPT_FILE = "prompt.pt"
ROWS_FILE = "rows.csv"


@dataclass
class RunOutcome:
    """What a run produced, and which seeds did not finish."""

    table: MetricsTable
    manifest: RunManifest
    output_dir: Path
    failed_seeds: list[int] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failed_seeds


def _json_default(value):
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Not serialisable: {type(value).__name__}")


class ExperimentRunner:
    """
    Runs one ExperimentConfig end to end.

    The run directory doubles as the resume state: a seed with `rows.csv`
    is done, a seed with only `prompt.pt` is re-evaluated without training.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        settings: Settings | None = None,
        command: str = "",
        progress: bool = False,
        record_stats: bool = True,
    ) -> None:
        self.config = config
        self.settings = settings or Settings.from_env()
        self.command = command
        self.progress = progress
        self.record_stats = record_stats
        self.output_dir = Path(config.output_dir)
        self.templates = TemplateLoader().templates
        self.stats: dict = {"timings": {}, "cache": {}}

        self._world: SyntheticWorld | None = None
        self._provider: DatasetProvider | None = None
        self._vocabulary: ClassVocabulary | None = None
        self._teacher: DistillationTeacher | None = None
        self._evaluator: ScenarioEvaluator | None = None

    # -- lazily built resources ---------------------------------------------

    @property
    def world(self) -> SyntheticWorld | None:
        if self._world is None and self.config.synthetic is not None:
            self._world = generate_synthetic(
                self.config.synthetic, self.config.distill.teacher_template
            )
        return self._world

    @property
    def provider(self) -> DatasetProvider:
        if self._provider is None:
            self._provider = DatasetProvider(self.settings.data_root, self.world)
        return self._provider

    @property
    def evaluator(self) -> ScenarioEvaluator:
        if self._evaluator is None:
            spec = ScenarioSpec(
                kind=self.config.scenario,
                source=self.config.dataset,
                targets=tuple(self.config.targets),
                shots=self.config.shots,
                seeds=tuple(self.config.seeds),
            )
            self._evaluator = build_scenario_evaluator(
                spec, self.provider, self.config.eval_batch_size
            )
        return self._evaluator

    @property
    def vocabulary(self) -> ClassVocabulary | None:
        path = self.config.vocabulary_path
        if self._vocabulary is None and path:
            if path == SYNTHETIC_VOCABULARY:
                self._vocabulary = self.world.vocabulary
            else:
                self._vocabulary = load_vocabulary(path)
        return self._vocabulary

    @property
    def cache_path(self) -> Path:
        key = {
            "teacher": self.config.teacher_backbone,
            "template": self.config.distill.teacher_template,
            "tau": self.config.distill.tau_teacher,
            "dtype": self.config.dtype,
            "synthetic": asdict(self.config.synthetic) if self.config.synthetic else None,
        }
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode("utf-8")).hexdigest()
        return Path(self.config.cache_dir) / f"{self.config.teacher_backbone}-{digest[:16]}.kdpc"

    @property
    def teacher(self) -> DistillationTeacher:
        if self._teacher is None:
            model = build_backbone(self.config.teacher_backbone, self.world, self.config.torch_dtype)
            cache = TeacherPredictionCache.open_or_reset(self.cache_path)
            self._teacher = DistillationTeacher(model, self.config.distill, cache)
        return self._teacher

    # -- manifest and stats -------------------------------------------------

    def write_manifest(self) -> RunManifest:
        """Write the manifest once; a later run must present the same config."""
        path = self.output_dir / MANIFEST
        resolved = json.loads(
            json.dumps(self.config.to_dict(), sort_keys=True, default=_json_default)
        )
        if path.exists():
            stored = json.loads(path.read_text(encoding="utf-8"))
            if stored["config"] != resolved:
                raise ResumeError(
                    f"{self.output_dir} holds a run with a different config; "
                    "choose another output_dir"
                )
            log_run_event("resumed", {"output_dir": str(self.output_dir)})
            return RunManifest(**stored)
        manifest = RunManifest(config=resolved, version=__version__, command=self.command)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True), encoding="utf-8")
        if self.world is not None and not (self.output_dir / "world").exists():
            save_synthetic(self.world, self.output_dir / "world")
        return manifest

    def _record_time(self, stage: str, started: float) -> None:
        self.stats["timings"][stage] = round(time.perf_counter() - started, 3)
        if self.record_stats:
            self._write_stats()

    def _write_stats(self) -> None:
        if self._teacher is not None and self._teacher.cache is not None:
            self.stats["cache"] = {
                **self._teacher.cache.stats(),
                "recomputed_after_corruption": self._teacher.recomputed_after_corruption,
            }
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / RUN_STATS).write_text(
            json.dumps(self.stats, indent=2, sort_keys=True), encoding="utf-8"
        )

    # -- stages -------------------------------------------------------------

    def episode(self, seed: int) -> FewShotEpisode:
        return sample_few_shot(self.evaluator.training_split(), self.config.shots, seed)

    def warm_cache(self) -> int:
        """Teacher predictions for every seed's episode; returns entries written."""
        if not self.config.objective.uses_teacher:
            return 0
        started = time.perf_counter()
        source = self.provider.source(self.config.dataset)
        class_set = self.evaluator.training_classes()
        for seed in self.config.seeds:
            loader = make_loader(self.episode(seed), source, self.config.eval_batch_size)
            for batch in loader:
                self.teacher.predict(batch.teacher_images, batch.image_ids, class_set)
        written = self.teacher.cache.flush()
        logger.info(f"Teacher cache warm: {written} new entries in {self.cache_path}")
        self._record_time("cache_warm", started)
        return written

    def build_student(self, prompt_config: PromptConfig, seed: int) -> PromptedStudent:
        encoder = build_backbone(
            self.config.student_backbone, self.world, self.config.torch_dtype
        )
        learner = build_prompt_learner(
            encoder,
            prompt_config,
            seed=seed,
            student_template=self.config.distill.student_template,
        )
        return PromptedStudent(encoder, learner, self.config.distill)

    def train_seed(self, seed: int) -> PromptedStudent:
        """Train (or reload) the prompt for one seed."""
        seed_dir = self.output_dir / f"seed_{seed}"
        seed_everything(seed)
        student = self.build_student(self.config.prompt, seed)
        prompt_path = seed_dir / PROMPT_FILE
        if prompt_path.exists():
            load_prompt(student.learner, prompt_path)
            log_run_event("prompt_reloaded", {"seed": seed, "path": str(prompt_path)})
            return student
        if self.config.method is PromptMethod.ZEROSHOT:
            return student

        started = time.perf_counter()
        train_config = replace(self.config.train, seed=seed)
        trainer = PromptTrainer(
            student,
            self.config.objective,
            train_config,
            self.config.distill,
            teacher=self.teacher if self.config.objective.uses_teacher else None,
            vocabulary=self.vocabulary,
            num_selected=self.config.num_selected,
            template_bank=self.templates.bank,
            progress=self.progress,
        )
        episode = self.episode(seed)
        source = self.provider.source(self.config.dataset)
        class_set = self.evaluator.training_classes()
        if self.config.objective is Objective.UPL_STAR:
            labels: dict[str, int] = {}
            for batch in make_loader(episode, source, self.config.eval_batch_size):
                labels |= self.teacher.pseudo_labels(
                    batch.teacher_images, batch.image_ids, class_set
                )
            trainer.set_pseudo_labels(labels)

        loader = make_loader(
            episode,
            source,
            train_config.batch_size,
            shuffle=True,
            seed=seed,
            mode="train",
        )
        trainer.fit(loader, class_set)
        save_prompt(
            student.learner,
            prompt_path,
            init={"ctx_init": self.config.prompt.ctx_init, "seed": seed},
        )
        if self._teacher is not None:
            self._teacher.cache.flush()
        self._record_time(f"train_seed_{seed}", started)
        return student

    def run_seed(self, seed: int) -> list[MetricsRow]:
        rows_path = self.output_dir / f"seed_{seed}" / ROWS_FILE
        if rows_path.exists():
            log_run_event("seed_skipped", {"seed": seed, "reason": "rows present"})
            return read_rows(rows_path)

        student = self.train_seed(seed)
        started = time.perf_counter()
        backbone = self.config.student_backbone
        rows = self.evaluator.evaluate(student, self.config.method_label, backbone, seed)
        if self.config.baseline and self.config.method is not PromptMethod.ZEROSHOT:
            baseline = self.build_student(
                replace(self.config.prompt, method=PromptMethod.ZEROSHOT), seed
            )
            rows += self.evaluator.evaluate(baseline, BASELINE_LABEL, backbone, seed)
        write_rows(rows, rows_path)
        self._record_time(f"eval_seed_{seed}", started)
        log_run_event("seed_completed", {"seed": seed, "rows": len(rows)})
        return rows

    # -- whole run ----------------------------------------------------------

    def run(self) -> RunOutcome:
        manifest = self.write_manifest()
        log_run_event(
            "run_started",
            {"name": self.config.name, "method": self.config.method_label, "seeds": self.config.seeds},
        )
        self.warm_cache()

        rows: list[MetricsRow] = []
        failed: list[int] = []
        if self.config.workers > 1 and len(self.config.seeds) > 1:
            if self._teacher is not None:
                self._teacher.cache.flush()
            started = time.perf_counter()
            with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
                futures = {
                    seed: pool.submit(_run_seed_in_worker, self.config, self.settings, seed)
                    for seed in self.config.seeds
                }
                for seed, future in futures.items():
                    try:
                        rows += future.result()
                    except KDPLError as e:
                        logger.error(f"Seed {seed} failed: {e}")
                        failed.append(seed)
            self._record_time("seeds_parallel", started)
        else:
            for seed in self.config.seeds:
                try:
                    rows += self.run_seed(seed)
                except KDPLError as e:
                    logger.error(f"Seed {seed} failed: {e}")
                    failed.append(seed)

        table = MetricsTable(rows=rows)
        table.aggregates = aggregate_rows(rows, self.evaluator.average_targets)
        write_results(table, self.output_dir / RESULTS)
        write_summary(
            table,
            self.output_dir / SUMMARY,
            self.config.dataset,
            self.evaluator.average_targets,
        )
        try:
            emit_comparison_plot([self.output_dir / RESULTS], self.output_dir / PLOT)
        except KDPLError as e:
            logger.warning(f"No comparison plot for {self.config.name}: {e}")
        self._write_stats()
        log_run_event("run_finished", {"name": self.config.name, "failed_seeds": failed})
        return RunOutcome(table, manifest, self.output_dir, failed)

    def evaluate_saved(self) -> RunOutcome:
        """Re-evaluate stored prompt checkpoints without training."""
        manifest_path = self.output_dir / MANIFEST
        if not manifest_path.exists():
            raise ResumeError(f"No manifest in {self.output_dir}")
        manifest = RunManifest(**json.loads(manifest_path.read_text(encoding="utf-8")))
        rows: list[MetricsRow] = []
        failed: list[int] = []
        for seed in self.config.seeds:
            prompt_path = self.output_dir / f"seed_{seed}" / PROMPT_FILE
            if self.config.method is not PromptMethod.ZEROSHOT and not prompt_path.exists():
                logger.error(f"Seed {seed} has no saved prompt at {prompt_path}")
                failed.append(seed)
                continue
            student = self.build_student(self.config.prompt, seed)
            if prompt_path.exists():
                load_prompt(student.learner, prompt_path)
            rows += self.evaluator.evaluate(
                student, self.config.method_label, self.config.student_backbone, seed
            )
        table = MetricsTable(rows=rows)
        table.aggregates = aggregate_rows(rows, self.evaluator.average_targets)
        write_results(table, self.output_dir / "eval_results.csv")
        return RunOutcome(table, manifest, self.output_dir, failed)


def _run_seed_in_worker(config: ExperimentConfig, settings: Settings, seed: int) -> list[MetricsRow]:
    torch.set_num_threads(1)
    return ExperimentRunner(config, settings, record_stats=False).run_seed(seed)


def run_experiment(
    config: ExperimentConfig,
    settings: Settings | None = None,
    command: str = "",
    progress: bool = False,
) -> RunOutcome:
    return ExperimentRunner(config, settings, command, progress).run()


def load_run_config(output_dir: str | Path) -> ExperimentConfig:
    """The resolved config stored in a run's manifest."""
    path = Path(output_dir) / MANIFEST
    if not path.exists():
        raise ResumeError(f"No manifest in {output_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    return config_from_dict(manifest["config"])
