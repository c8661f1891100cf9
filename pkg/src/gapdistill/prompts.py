"""Prompt assembly from external template files.

Templates are plain text with ``{{slot}}`` placeholders and live in the
package's ``templates/`` directory (or any directory passed as
``template_dir``, so deployments can swap prompt wording without code
changes):

* ``teacher_iter1.tmpl`` — teacher prompt for the first gap-aware
  regeneration; validation exemplars render headerless.
* ``teacher_iterk.tmpl`` — teacher prompt for later regenerations;
  exemplars carry one ``### ITERATION j:`` block per history entry.
* ``student_train.tmpl`` / ``student_eval.tmpl`` — student-side prompts.
* ``exemplar_block.tmpl`` / ``iteration_block.tmpl`` — the repeated
  validation-example units the teacher frames include via their
  ``{{exemplars}}`` slot.

Section markers form a closed set (:data:`SECTION_MARKERS` plus the
``### ITERATION j:`` header) so scripted backends and tests can parse
emitted prompts reliably.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Problem

DEFAULT_TEMPLATE_DIR = Path(__file__).parent / "templates"
DEFAULT_CHARS_PER_TOKEN = 4

MARKER_QUESTION = "### question:"
MARKER_TEACHER = "### teacher answer:"
MARKER_STUDENT = "### student answer:"
MARKER_SCORE = "### score:"
MARKER_NEW_ANSWER = "### new_answer"

SECTION_MARKERS = (
    MARKER_QUESTION,
    MARKER_TEACHER,
    MARKER_STUDENT,
    MARKER_SCORE,
    MARKER_NEW_ANSWER,
)

_ITERATION_MARKER_RE = re.compile(r"^### ITERATION (\d+):$", flags=re.MULTILINE)


@dataclass
class ValidationHistoryEntry:
    """One round of a validation problem's history.

    ``teacher_answer`` is the teacher rationale generated in round
    ``iteration``; ``student_answer`` is what the round-``iteration`` student
    produced, and ``score`` its grade.
    """

    iteration: int
    teacher_answer: str
    student_answer: str
    score: int


@dataclass
class ValidationExample:
    question: str
    history: list[ValidationHistoryEntry] = field(default_factory=list)


@dataclass
class GapContext:
    """Everything the teacher sees when regenerating one training question."""

    question: str
    prev_student: str | None = None
    prev_teacher: str | None = None
    validation_examples: list[ValidationExample] = field(default_factory=list)


@dataclass
class BudgetCheck:
    ok: bool
    estimated: int
    budget: int
    exceeded_by: int


_template_cache: dict[Path, str] = {}


def load_template(name: str, template_dir: str | Path | None = None) -> str:
    path = Path(template_dir or DEFAULT_TEMPLATE_DIR) / name
    resolved = path.resolve()
    if resolved not in _template_cache:
        _template_cache[resolved] = path.read_text(encoding="utf-8")
    return _template_cache[resolved]


def _fill(template: str, values: dict[str, object]) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{{%s}}" % key, str(value))
    return out


def _question_of(item) -> str:
    return item.question if isinstance(item, Problem) else str(item)


def _render_target(question: str, prev_teacher: str | None, prev_student: str | None) -> str:
    parts = [MARKER_QUESTION, question]
    if prev_teacher is not None:
        parts += [MARKER_TEACHER, prev_teacher]
    if prev_student is not None:
        parts += [MARKER_STUDENT, prev_student]
    return "\n".join(parts) + "\n"


def build_initial_teacher_prompt(
    question,
    instruction: str = "",
    exemplars: list[tuple] = (),
    template_dir: str | Path | None = None,
) -> str:
    """Teacher prompt for the first gap-aware regeneration.

    ``exemplars`` holds ``(problem_or_question, teacher_answer,
    student_answer, score)`` tuples — the scored first-round validation set.
    Exemplar blocks render headerless (no ITERATION markers); the target
    question comes last.
    """
    block_tmpl = load_template("exemplar_block.tmpl", template_dir)
    blocks = "".join(
        _fill(
            block_tmpl,
            {
                "question": _question_of(item),
                "teacher_answer": teacher_answer,
                "student_answer": student_answer,
                "score": score,
            },
        )
        for item, teacher_answer, student_answer, score in exemplars
    )
    frame = load_template("teacher_iter1.tmpl", template_dir)
    return _fill(
        frame,
        {
            "exemplars": blocks,
            "target": _render_target(_question_of(question), None, None),
            "instruction": instruction,
        },
    )


def _validate_history(history: list[ValidationHistoryEntry]) -> None:
    if not history:
        raise ValueError("validation example has an empty history")
    indices = [entry.iteration for entry in history]
    for prev, cur in zip(indices, indices[1:]):
        if cur != prev + 1:
            raise ValueError(f"history iterations have a gap: {indices}")


def build_gap_prompt(
    gap: GapContext,
    instruction: str = "",
    template_dir: str | Path | None = None,
) -> str:
    """Teacher prompt for regenerations with multi-round history.

    Each validation example renders its question once, then one
    ``### ITERATION j:`` block per history entry in ascending order; a gap in
    the numbering is an error (histories normally start at 1 — a later start
    only appears after oldest-round pruning).  The target question with its
    previous teacher/student answers comes last.
    """
    entry_tmpl = load_template("iteration_block.tmpl", template_dir)
    blocks = []
    for example in gap.validation_examples:
        _validate_history(example.history)
        entries = "".join(
            _fill(
                entry_tmpl,
                {
                    "iteration": entry.iteration,
                    "teacher_answer": entry.teacher_answer,
                    "student_answer": entry.student_answer,
                    "score": entry.score,
                },
            )
            for entry in example.history
        )
        blocks.append(MARKER_QUESTION + "\n" + example.question + "\n" + entries + "\n\n")
    frame = load_template("teacher_iterk.tmpl", template_dir)
    return _fill(
        frame,
        {
            "exemplars": "".join(blocks),
            "target": _render_target(gap.question, gap.prev_teacher, gap.prev_student),
            "instruction": instruction,
        },
    )


def build_student_prompt(
    question,
    instruction: str,
    few_shot: list[tuple[str, str]] = (),
    template_dir: str | Path | None = None,
) -> str:
    """Student-facing evaluation prompt: instruction, optional worked
    examples, then the question (always the last ``### question:`` block)."""
    shots = "".join(
        MARKER_QUESTION + "\n" + _question_of(q) + "\n" + rationale + "\n\n"
        for q, rationale in few_shot
    )
    frame = load_template("student_eval.tmpl", template_dir)
    return _fill(
        frame,
        {"instruction": instruction, "few_shot": shots, "question": _question_of(question)},
    )


def build_student_train_prompt(
    question, instruction: str, template_dir: str | Path | None = None
) -> str:
    """The prompt half of a training pair, as the trainer should render it."""
    frame = load_template("student_train.tmpl", template_dir)
    return _fill(frame, {"instruction": instruction, "question": _question_of(question)})


# ---------------------------------------------------------------------------
# budget


def estimate_tokens(text: str, chars_per_token: int = DEFAULT_CHARS_PER_TOKEN) -> int:
    """Deterministic proxy token count: ceil(len(text) / chars_per_token)."""
    if chars_per_token < 1:
        raise ValueError("chars_per_token must be >= 1")
    return math.ceil(len(text) / chars_per_token)


def check_budget(
    prompt: str, budget: int, chars_per_token: int = DEFAULT_CHARS_PER_TOKEN
) -> BudgetCheck:
    """Compare a prompt's estimated tokens against a budget (inclusive)."""
    estimated = estimate_tokens(prompt, chars_per_token)
    return BudgetCheck(
        ok=estimated <= budget,
        estimated=estimated,
        budget=budget,
        exceeded_by=max(0, estimated - budget),
    )


def drop_oldest_round(examples: list[ValidationExample]) -> list[ValidationExample]:
    """Remove every example's oldest history entry.

    Whole rounds go at once (never partial blocks).  Raises when any example
    is already down to a single entry.
    """
    oldest = min(entry.iteration for example in examples for entry in example.history)
    pruned = []
    for example in examples:
        kept = [e for e in example.history if e.iteration != oldest]
        if not kept:
            raise ValueError(
                "cannot prune: a validation example would lose its last history entry"
            )
        pruned.append(ValidationExample(question=example.question, history=kept))
    return pruned


# ---------------------------------------------------------------------------
# prompt inspection helpers (also used by scripted backends)


def iteration_indices(prompt: str) -> list[int]:
    return [int(m.group(1)) for m in _ITERATION_MARKER_RE.finditer(prompt)]


def last_question_block(prompt: str) -> str | None:
    """Content of the last ``### question:`` section, up to the next marker."""
    idx = prompt.rfind(MARKER_QUESTION + "\n")
    if idx == -1:
        return None
    body = prompt[idx + len(MARKER_QUESTION) + 1:]
    cut = len(body)
    for line_match in re.finditer(r"^### .*$", body, flags=re.MULTILINE):
        cut = line_match.start()
        break
    return body[:cut].strip("\n")


def foreign_markers(prompt: str) -> list[str]:
    """Lines that look like section markers but are outside the closed set."""
    bad = []
    for line in prompt.split("\n"):
        if line.startswith("### "):
            if line in SECTION_MARKERS or line == MARKER_NEW_ANSWER:
                continue
            if _ITERATION_MARKER_RE.fullmatch(line):
                continue
            bad.append(line)
    return bad
