from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from rich.table import Table
from rich.text import Text

from aglp._trainer import EvaluationReport, LossReport

SEPARATOR = (" ╲ ", "dim cyan")

SUMMARY_HEADER = (
    "configuration",
    "runs",
    "mean_target_accuracy",
    "std_target_accuracy",
    "mean_source_accuracy",
)


@dataclass(frozen=True)
class RunOutcome:
    configuration: str
    seed: int
    steps: int
    target_accuracy: float
    source_accuracy: float


@dataclass(frozen=True)
class SummaryRow:
    configuration: str
    runs: int
    mean_target_accuracy: float
    std_target_accuracy: float
    mean_source_accuracy: float

    def as_row(self) -> list:
        return [
            self.configuration,
            self.runs,
            self.mean_target_accuracy,
            self.std_target_accuracy,
            self.mean_source_accuracy,
        ]


def summarize(outcomes: Iterable[RunOutcome]) -> list[SummaryRow]:
    """Mean and population stdev of target accuracy per configuration, in first-seen order."""
    grouped: dict[str, list[RunOutcome]] = {}
    for outcome in outcomes:
        grouped.setdefault(outcome.configuration, []).append(outcome)

    rows = []
    for name, runs in grouped.items():
        target = np.array([run.target_accuracy for run in runs])
        source = np.array([run.source_accuracy for run in runs])
        rows.append(
            SummaryRow(
                configuration=name,
                runs=len(runs),
                mean_target_accuracy=float(target.mean()),
                std_target_accuracy=float(target.std()),
                mean_source_accuracy=float(source.mean()),
            )
        )
    return rows


def _term(name: str, value: float) -> Text:
    style = "b" if math.isfinite(value) else "b red"
    return Text.assemble((f"{name} ", "dim"), (f"{value:.4f}", style))


def loss_report_text(report: LossReport) -> Text:
    """One line per step: step ╲ source ╲ labeled ╲ unlabeled ╲ centroid ╲ total."""
    return Text.assemble(
        (f"step {report.step}", "b"),
        SEPARATOR,
        _term("src", report.source),
        SEPARATOR,
        _term("ce", report.labeled),
        SEPARATOR,
        _term("u", report.unlabeled),
        SEPARATOR,
        _term("ca", report.centroid),
        SEPARATOR,
        _term("total", report.total),
    )


def summary_table(rows: list[SummaryRow]) -> Table:
    table = Table(title="Target accuracy", title_style="b")
    table.add_column("configuration", style="b")
    table.add_column("runs", justify="right")
    table.add_column("target", justify="right", style="green")
    table.add_column("source", justify="right", style="dim")
    for row in rows:
        table.add_row(
            row.configuration,
            str(row.runs),
            f"{100 * row.mean_target_accuracy:.2f} ± {100 * row.std_target_accuracy:.2f}",
            f"{100 * row.mean_source_accuracy:.2f}",
        )
    return table


def evaluation_table(report: EvaluationReport) -> Table:
    """Per-class accuracy next to the confusion counts (rows true, columns predicted)."""
    num_classes = report.confusion.shape[0]
    table = Table(
        title=f"accuracy {100 * report.accuracy:.2f}% over {report.count} examples",
        title_style="b",
    )
    table.add_column("class", style="b")
    table.add_column("accuracy", justify="right", style="green")
    for k in range(num_classes):
        table.add_column(f"→{k}", justify="right", style="dim")
    for k in range(num_classes):
        accuracy = report.per_class[k]
        shown = "–" if np.isnan(accuracy) else f"{100 * accuracy:.2f}"
        table.add_row(str(k), shown, *(str(int(n)) for n in report.confusion[k]))
    return table


EVALUATION_HEADER_PREFIX = ("class", "support", "accuracy")


def evaluation_rows(report: EvaluationReport) -> tuple[list[str], list[list]]:
    num_classes = report.confusion.shape[0]
    header = [*EVALUATION_HEADER_PREFIX, *(f"predicted_{k}" for k in range(num_classes))]
    rows = []
    for k in range(num_classes):
        support = int(report.confusion[k].sum())
        rows.append([k, support, float(report.per_class[k]), *report.confusion[k].tolist()])
    rows.append(["all", report.count, report.accuracy, *([""] * num_classes)])
    return header, rows
