"""Results table (CSV) and the markdown summary derived from it."""

from collections.abc import Sequence
from dataclasses import asdict, fields
from pathlib import Path

import pandas as pd
from loguru import logger

from ..evaluators.metrics import AVERAGE_DATASET, HARMONIC_SPLIT, MEAN_SEED, round_half_up
from ..models.experiment import MetricsRow, MetricsTable

RESULT_COLUMNS = [f.name for f in fields(MetricsRow)]
MISSING = "NA"


def _format_accuracy(value: float | None) -> str:
    return MISSING if value is None else f"{round_half_up(value):.2f}"


def rows_to_frame(rows: Sequence[MetricsRow], exact: bool = False) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(row) for row in rows], columns=RESULT_COLUMNS)
    if exact:
        frame["accuracy"] = [MISSING if r.accuracy is None else repr(float(r.accuracy)) for r in rows]
    else:
        frame["accuracy"] = [_format_accuracy(r.accuracy) for r in rows]
    return frame


def write_results(table: MetricsTable, path: str | Path) -> Path:
    """Raw rows then aggregates; accuracies at two decimals, missing ones as NA."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows_to_frame(table.all_rows).to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(table.rows)} rows and {len(table.aggregates)} aggregates to {path}")
    return path


def read_results(path: str | Path) -> MetricsTable:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = set(RESULT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path} lacks result columns {sorted(missing)}")
    table = MetricsTable()
    for record in frame.to_dict("records"):
        accuracy = None if record["accuracy"] == MISSING else float(record["accuracy"])
        row = MetricsRow(**{**{k: record[k] for k in RESULT_COLUMNS}, "accuracy": accuracy})
        derived = row.seed == MEAN_SEED
        (table.aggregates if derived else table.rows).append(row)
    return table


def read_rows(path: str | Path) -> list[MetricsRow]:
    return read_results(path).rows


def write_rows(rows: Sequence[MetricsRow], path: str | Path) -> None:
    """Per-seed rows with accuracies at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows_to_frame(rows, exact=True).to_csv(path, index=False, lineterminator="\n")


def _markdown(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body])


def summary_markdown(table: MetricsTable, source: str, targets: Sequence[str] = ()) -> str:
    """Source/Targets/Average tables and Base/New/H tables from the aggregate rows."""
    means = pd.DataFrame([asdict(r) for r in table.aggregates], columns=RESULT_COLUMNS)
    if means.empty:
        return "# Results\n\nNo aggregate rows.\n"
    means["label"] = means["accuracy"].map(_format_accuracy)
    sections = ["# Results"]

    transfer = means[means["split"] == "test"]
    if not transfer.empty:
        columns = [source, *[t for t in targets if t != source]]
        if targets:
            columns.append(AVERAGE_DATASET)
        pivot = transfer.pivot_table(
            index=["method", "backbone"], columns="dataset", values="label", aggfunc="first"
        )
        pivot = pivot.reindex(columns=[c for c in columns if c in pivot.columns]).fillna(MISSING)
        pivot = pivot.rename(columns={source: f"{source} (source)", AVERAGE_DATASET: "Average"})
        sections += ["", "## Source / Targets", "", _markdown(pivot.reset_index())]

    split_rows = means[means["split"].isin(["base", "new", HARMONIC_SPLIT])]
    if not split_rows.empty:
        pivot = split_rows.pivot_table(
            index=["method", "backbone", "dataset"], columns="split", values="label", aggfunc="first"
        )
        pivot = pivot.reindex(columns=["base", "new", HARMONIC_SPLIT]).fillna(MISSING)
        pivot = pivot.rename(columns={"base": "Base", "new": "New"})
        sections += ["", "## Base / New", "", _markdown(pivot.reset_index())]
    return "\n".join(sections) + "\n"


def write_summary(
    table: MetricsTable, path: str | Path, source: str, targets: Sequence[str] = ()
) -> Path:
    path = Path(path)
    path.write_text(summary_markdown(table, source, targets), encoding="utf-8")
    logger.debug(f"Wrote summary {path}")
    return path
