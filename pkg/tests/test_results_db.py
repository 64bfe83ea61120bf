import pytest

from src.database.results_db import (
    MISSING,
    RESULT_COLUMNS,
    read_results,
    read_rows,
    summary_markdown,
    write_results,
    write_rows,
)
from src.evaluators.metrics import BASELINE_LABEL, aggregate_rows
from src.evaluators.plots import comparison_values, emit_comparison_plot
from src.models.experiment import MetricsRow, MetricsTable
from src.utils.errors import ContractViolation


def _table(method: str, accuracies: dict[str, float | None]) -> MetricsTable:
    rows = [
        MetricsRow("cross_dataset", method, "toy-vit-b", dataset, seed, "test", value)
        for dataset, value in accuracies.items()
        for seed in ("1", "2")
    ]
    table = MetricsTable(rows)
    table.aggregates = aggregate_rows(rows, [d for d in accuracies if d != "src"])
    return table


class TestResultsFile:
    def test_written_rows_read_back(self, tmp_path):
        table = _table("CoOp+KDPL", {"src": 71.234, "a": 50.0, "b": None})
        path = write_results(table, tmp_path / "out" / "results.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(RESULT_COLUMNS)
        assert "cross_dataset,CoOp+KDPL,toy-vit-b,src,1,test,71.23" in lines
        assert f"cross_dataset,CoOp+KDPL,toy-vit-b,b,1,test,{MISSING}" in lines

        again = read_results(path)
        assert len(again.rows) == len(table.rows)
        assert len(again.aggregates) == len(table.aggregates)
        assert again.rows[0].accuracy == 71.23
        assert again.rows[-1].accuracy is None
        assert again.rows[0].seed == "1"

    def test_rows_only(self, tmp_path):
        rows = _table("CoOp", {"src": 60.0}).rows
        write_rows(rows, tmp_path / "rows.csv")
        assert read_rows(tmp_path / "rows.csv") == rows

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dataset,accuracy\nsrc,1.00\n")
        with pytest.raises(ValueError):
            read_results(path)


class TestSummary:
    def test_transfer_table(self):
        table = _table("CoOp+KDPL", {"src": 70.0, "a": 50.0, "b": 30.0})
        summary = summary_markdown(table, "src", ["src", "a", "b"])
        assert "## Source / Targets" in summary
        assert "| method | backbone | src (source) | a | b | Average |" in summary
        assert "| CoOp+KDPL | toy-vit-b | 70.00 | 50.00 | 30.00 | 40.00 |" in summary

    def test_base_new_table(self):
        rows = [
            MetricsRow("base_to_novel", "MaPLe", "toy", "src", "1", "base", 77.13),
            MetricsRow("base_to_novel", "MaPLe", "toy", "src", "1", "new", 60.82),
        ]
        table = MetricsTable(rows, aggregate_rows(rows))
        summary = summary_markdown(table, "src")
        assert "## Base / New" in summary
        assert "| MaPLe | toy | src | 77.13 | 60.82 | 68.01 |" in summary

    def test_empty(self):
        assert "No aggregate rows" in summary_markdown(MetricsTable(), "src")


class TestComparisonPlot:
    def test_shared_datasets_only(self, tmp_path):
        first = write_results(_table("CoOp", {"src": 60.0, "a": 40.0}), tmp_path / "1.csv")
        second = write_results(
            _table("CoOp+KDPL", {"src": 65.0, "a": 45.0, "b": 20.0}), tmp_path / "2.csv"
        )
        values = emit_comparison_plot([first, second], tmp_path / "plots" / "cmp.png")
        assert values == {
            "CoOp": {"src": 60.0, "a": 40.0},
            "CoOp+KDPL": {"src": 65.0, "a": 45.0},
        }
        assert (tmp_path / "plots" / "cmp.png").read_bytes().startswith(b"\x89PNG")

    def test_labels_name_the_series(self, tmp_path):
        first = write_results(_table("CoOp", {"src": 60.0}), tmp_path / "1.csv")
        second = write_results(_table("CoOp", {"src": 62.0}), tmp_path / "2.csv")
        values = comparison_values([first, second], labels=["K=10", "K=50"])
        assert values == {"K=10": {"src": 60.0}, "K=50": {"src": 62.0}}
        with pytest.raises(ContractViolation):
            comparison_values([first, second], labels=["only one"])

    def test_nothing_to_plot(self, tmp_path):
        path = write_results(_table("CoOp", {"src": None}), tmp_path / "1.csv")
        with pytest.raises(ContractViolation):
            emit_comparison_plot([path], tmp_path / "cmp.png")

    def test_labelled_files_plot_the_trained_method(self, tmp_path):
        paths = []
        for k, trained in ((1, 70.0), (2, 80.0)):
            rows = [
                MetricsRow("class_agnostic", "coop+ca_kdpl", "toy", "synthetic", "1", "test", trained),
                MetricsRow("class_agnostic", BASELINE_LABEL, "toy", "synthetic", "1", "test", 40.0),
            ]
            table = MetricsTable(rows, aggregate_rows(rows))
            paths.append(write_results(table, tmp_path / f"k{k}.csv"))
        values = comparison_values(paths, labels=["K=1", "K=2"])
        assert values == {"K=1": {"synthetic": 70.0}, "K=2": {"synthetic": 80.0}}

    def test_labelled_baseline_only_file(self, tmp_path):
        rows = [MetricsRow("cross_dataset", BASELINE_LABEL, "toy", "src", "1", "test", 40.0)]
        path = write_results(MetricsTable(rows, aggregate_rows(rows)), tmp_path / "zs.csv")
        assert comparison_values([path], labels=["zero-shot"]) == {"zero-shot": {"src": 40.0}}
