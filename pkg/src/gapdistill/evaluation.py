"""Suite evaluation and result reporting.

Reports work from per-suite metrics alone, so they can be built either from
live evaluation runs or from externally produced fixtures (transcribed
result tables), without backends in the loop.  Accuracies are reported in
percentage points with gains against a baseline iteration, and an exact
McNemar p-value marks significant per-suite changes whenever paired
per-item gradings are available.
"""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field

from .backends import GenerationParams, batch_generate
from .corpus import TestSuite
from .grade import (
    GradedGeneration,
    SuiteMetrics,
    accuracy,
    grade_batch,
    significance,
    weighted_average,
)
from .prompts import build_student_prompt

logger = logging.getLogger(__name__)

AVERAGE_LABEL = "Average"
SIGNIFICANCE_LEVEL = 0.05


def evaluate_suite(
    backend,
    suite: TestSuite,
    params: GenerationParams,
    instruction: str,
    few_shot: list[tuple[str, str]] = (),
    parallelism: int = 1,
    checkpoint_id: str | None = None,
    template_dir=None,
) -> tuple[SuiteMetrics, list[GradedGeneration]]:
    """Generate, grade, and fold one suite; returns metrics plus the
    per-item gradings (kept for significance testing).

    ``few_shot`` must carry at least ``suite.few_shot_k`` worked examples;
    only the first ``few_shot_k`` are used.  Failed generations grade as
    empty text (score 0) rather than aborting the suite.
    """
    if len(few_shot) < suite.few_shot_k:
        raise ValueError(
            f"suite {suite.name} needs {suite.few_shot_k} few-shot exemplars, "
            f"got {len(few_shot)}"
        )
    shots = list(few_shot)[: suite.few_shot_k]
    prompts = [
        build_student_prompt(p.question, instruction, shots, template_dir=template_dir)
        for p in suite.problems
    ]
    if checkpoint_id is not None:
        results = batch_generate(
            _Bound(backend, checkpoint_id), prompts, params, parallelism=parallelism
        )
    else:
        results = batch_generate(backend, prompts, params, parallelism=parallelism)
    failures = sum(1 for r in results if not r.ok)
    if failures:
        logger.warning("suite %s: %d generation failures scored as 0", suite.name, failures)
    pairs = [
        (p.id, r.text if r.ok else "") for p, r in zip(suite.problems, results)
    ]
    graded = grade_batch(pairs, suite.problems, answer_kind=suite.answer_kind)
    return accuracy(graded, suite=suite.name), graded


class _Bound:
    """Pins a backend to one checkpoint for the duration of a batch."""

    def __init__(self, backend, checkpoint_id: str):
        self.backend = backend
        self.checkpoint_id = checkpoint_id

    def generate(self, prompt, params=None):
        return self.backend.generate(prompt, params, checkpoint_id=self.checkpoint_id)


# ---------------------------------------------------------------------------
# reports


@dataclass
class IterationReport:
    """Accuracy table over iterations, percent scale, gains vs a baseline."""

    model: str
    suites: list[str]
    per_iteration: list[dict[str, SuiteMetrics]]
    accuracies: list[dict[str, float]]          # percent, [iteration][suite]
    averages: list[float]                       # percent, size-weighted
    gains: list[dict[str, float]]               # percent points vs baseline
    average_gains: list[float]
    p_values: list[dict[str, float | None]] = field(default_factory=list)
    baseline_iteration: int = 1

    @property
    def iterations(self) -> int:
        return len(self.per_iteration)


def build_report(
    per_iteration: list[dict[str, SuiteMetrics]],
    model: str = "",
    baseline_iteration: int = 1,
    gradings: list[dict[str, list[GradedGeneration]]] | None = None,
    percent: bool = False,
) -> IterationReport:
    """Fold per-iteration suite metrics into an :class:`IterationReport`.

    ``percent=False`` treats metric accuracies as fractions and scales them
    by 100; ``percent=True`` passes them through (fixture tables are already
    in percent).  Gains are against ``baseline_iteration`` (so all zero
    there); when ``gradings`` gives paired per-item scores, per-suite exact
    McNemar p-values against the baseline iteration are attached.
    """
    if not per_iteration:
        raise ValueError("report needs at least one iteration")
    suites = list(per_iteration[0].keys())
    for i, row in enumerate(per_iteration, start=1):
        if list(row.keys()) != suites:
            raise ValueError(
                f"iteration {i} reports suites {list(row.keys())}, expected {suites}"
            )
    if not 1 <= baseline_iteration <= len(per_iteration):
        raise ValueError(f"baseline iteration {baseline_iteration} out of range")

    scale = 1.0 if percent else 100.0
    accuracies = [
        {s: row[s].accuracy * scale for s in suites} for row in per_iteration
    ]
    averages = [
        weighted_average([(acc[s], row[s].n) for s in suites])
        for acc, row in zip(accuracies, per_iteration)
    ]
    base = accuracies[baseline_iteration - 1]
    base_avg = averages[baseline_iteration - 1]
    gains = [{s: acc[s] - base[s] for s in suites} for acc in accuracies]
    average_gains = [avg - base_avg for avg in averages]

    p_values: list[dict[str, float | None]] = []
    for i in range(len(per_iteration)):
        row: dict[str, float | None] = {}
        for s in suites:
            if (
                gradings is not None
                and i != baseline_iteration - 1
                and s in gradings[baseline_iteration - 1]
                and s in gradings[i]
            ):
                row[s] = significance(gradings[baseline_iteration - 1][s], gradings[i][s])
            else:
                row[s] = None
        p_values.append(row)

    return IterationReport(
        model=model,
        suites=suites,
        per_iteration=per_iteration,
        accuracies=accuracies,
        averages=averages,
        gains=gains,
        average_gains=average_gains,
        p_values=p_values,
        baseline_iteration=baseline_iteration,
    )


def _format_cell(value: float, gain: float, is_baseline: bool, p: float | None) -> str:
    cell = f"{value:.2f}"
    if not is_baseline:
        if gain > 0:
            cell += f" (↑+{gain:.2f})"
        elif gain < 0:
            cell += f" (↓{gain:.2f})"
        else:
            cell += " (+0.00)"
        if p is not None and p < SIGNIFICANCE_LEVEL:
            cell += "*"
    return cell


def render_table(report: IterationReport, fmt: str = "text") -> str:
    """Render an iteration report as ``text``, ``markdown``, or ``csv``.

    Accuracies print at two decimals; gains ride along as ``(↑+x.xx)`` /
    ``(↓-x.xx)`` with a ``*`` when the paired test is significant at
    p < 0.05.  The CSV form is plain numbers (no annotations) so it parses
    back losslessly at the printed precision.
    """
    headers = ["Iteration"] + report.suites + [AVERAGE_LABEL]
    rows: list[list[str]] = []
    for i in range(report.iterations):
        is_base = i == report.baseline_iteration - 1
        row = [str(i + 1)]
        for s in report.suites:
            row.append(
                _format_cell(
                    report.accuracies[i][s], report.gains[i][s], is_base, report.p_values[i][s]
                )
            )
        row.append(
            _format_cell(
                report.averages[i], report.average_gains[i], is_base, None
            )
        )
        rows.append(row)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["model"] + headers)
        for i, _ in enumerate(rows):
            writer.writerow(
                [report.model, str(i + 1)]
                + [f"{report.accuracies[i][s]:.2f}" for s in report.suites]
                + [f"{report.averages[i]:.2f}"]
            )
        return buf.getvalue()

    if fmt == "markdown":
        lines = ["| " + " | ".join(headers) + " |"]
        lines.append("|" + "|".join([" --- "] * len(headers)) + "|")
        for row in rows:
            lines.append("| " + " | ".join(row) + " |")
        out = "\n".join(lines) + "\n"
        if report.model:
            out = f"**{report.model}**\n\n" + out
        return out

    if fmt == "text":
        widths = [
            max(len(headers[c]), max((len(r[c]) for r in rows), default=0))
            for c in range(len(headers))
        ]
        lines = []
        if report.model:
            lines.append(report.model)
        lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"

    raise ValueError(f"unknown table format {fmt!r}")


_CELL_RE = re.compile(r"^(\d+\.\d{2})")


def parse_rendered_table(text: str, fmt: str = "text") -> list[list[float]]:
    """Recover the accuracy grid (including Average) from a rendered table."""
    values: list[list[float]] = []
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        for row in rows[1:]:
            values.append([float(x) for x in row[2:]])
        return values
    for line in text.splitlines():
        line = line.strip()
        if fmt == "markdown":
            if not line.startswith("|"):
                continue
            cells = [c.strip() for c in line.strip("|").split("|")]
        else:
            cells = re.split(r"\s{2,}", line)
        if not cells or not cells[0].isdigit():
            continue
        row = []
        for cell in cells[1:]:
            m = _CELL_RE.match(cell)
            if m:
                row.append(float(m.group(1)))
        if row:
            values.append(row)
    return values


def render_comparison_table(
    rows: list[tuple[str, float, float]],
    headers: tuple[str, str] = ("standard distillation", "iterative"),
    title: str = "",
) -> str:
    """Two-column comparison (e.g. transfer suites: baseline vs final)."""
    label_w = max([len(r[0]) for r in rows] + [len("model")])
    col_w = [max(len(h), 6) for h in headers]
    lines = []
    if title:
        lines.append(title)
    lines.append(
        "model".ljust(label_w) + "  " + "  ".join(h.ljust(w) for h, w in zip(headers, col_w)).rstrip()
    )
    lines.append("-" * label_w + "  " + "  ".join("-" * w for w in col_w))
    for label, a, b in rows:
        lines.append(
            label.ljust(label_w)
            + "  "
            + f"{a:.2f}".ljust(col_w[0])
            + "  "
            + f"{b:.2f}".ljust(col_w[1]).rstrip()
        )
    return "\n".join(lines) + "\n"


def emit_plot_series(reports: list[IterationReport], path) -> None:
    """Write accuracy-vs-iteration series for plotting: one CSV row per
    (model, suite, iteration)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "suite", "iteration", "accuracy"])
        for report in reports:
            for i in range(report.iterations):
                for s in report.suites:
                    writer.writerow(
                        [report.model, s, i + 1, f"{report.accuracies[i][s]:.2f}"]
                    )
