"""Grouped per-dataset accuracy bar charts."""

from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from loguru import logger  # noqa: E402

from ..database.results_db import read_results  # noqa: E402
from ..utils.errors import ContractViolation  # noqa: E402
from .metrics import AVERAGE_DATASET, BASELINE_LABEL, MEAN_SEED  # noqa: E402


def _series_name(label: str | None, method: str, trained: set[str]) -> str | None:
    if label is None:
        return method
    if trained and method not in trained:
        return None
    return label if len(trained) <= 1 else f"{label}: {method}"


def comparison_values(
    results_files: Sequence[str | Path],
    split: str = "test",
    labels: Sequence[str] | None = None,
) -> dict[str, dict[str, float]]:
    """
    {series: {dataset: seed-mean accuracy}} over the datasets every file reports.

    Series are named by the rows' method unless `labels` gives one name per file.
    A labelled file contributes its trained method only; its zero-shot baseline
    rows are plotted only when the file holds nothing else.
    """
    if labels is not None and len(labels) != len(results_files):
        raise ContractViolation("One label is required per results file")
    per_method: dict[str, dict[str, float]] = {}
    for index, path in enumerate(results_files):
        rows = [
            row
            for row in read_results(path).aggregates
            if row.seed == MEAN_SEED
            and row.split == split
            and row.dataset != AVERAGE_DATASET
            and row.accuracy is not None
        ]
        trained = {row.method for row in rows} - {BASELINE_LABEL}
        label = labels[index] if labels is not None else None
        for row in rows:
            series = _series_name(label, row.method, trained)
            if series is not None:
                per_method.setdefault(series, {})[row.dataset] = row.accuracy
    if not per_method:
        raise ContractViolation("No aggregate rows to plot")

    dataset_sets = [set(values) for values in per_method.values()]
    shared = set.intersection(*dataset_sets)
    dropped = set.union(*dataset_sets) - shared
    if dropped:
        logger.warning(f"Plotting only shared datasets; skipping {sorted(dropped)}")
    order = [d for d in next(iter(per_method.values())) if d in shared]
    return {method: {d: values[d] for d in order} for method, values in per_method.items()}


def emit_comparison_plot(
    results_files: Sequence[str | Path],
    output: str | Path,
    split: str = "test",
    title: str = "Per-dataset accuracy",
    labels: Sequence[str] | None = None,
) -> dict[str, dict[str, float]]:
    """Write a grouped bar chart (datasets on x, one bar per method); returns the plotted values."""
    values = comparison_values(results_files, split, labels)
    methods = list(values)
    datasets = list(next(iter(values.values())))
    if not datasets:
        raise ContractViolation("The result sets share no dataset")

    x = np.arange(len(datasets))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(datasets)), 4.0))
    for i, method in enumerate(methods):
        heights = [values[method][d] for d in datasets]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, heights, width, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(datasets, rotation=30, ha="right")
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()

    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output)
    plt.close(fig)
    logger.info(f"Saved comparison plot of {len(methods)} methods x {len(datasets)} datasets to {output}")
    return values
