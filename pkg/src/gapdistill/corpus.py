"""Corpus loading, filtering, and splitting.

A corpus is a JSONL file with one problem per line:

    {"id": "...", "question": "...", "answer": "...",
     "question_type": "...", "choices": {"A": "...", ...}, "suite": "..."}

``question`` and ``answer`` are required.  ``id`` is synthesized from a hash
of the question when absent.  ``question_type`` and ``choices`` land in
``Problem.metadata`` (keys ``question_type`` and ``choice.A`` .. ``choice.J``);
unknown top-level keys are preserved in metadata as strings.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

CHOICE_LETTERS = "ABCDEFGHIJ"

#: Known test suites: name -> (answer_kind, expected_size, few_shot_k).
#: In-domain suites are evaluated zero-shot; the two out-of-domain suites
#: keep the few-shot counts their harnesses conventionally use.
SUITE_REGISTRY = {
    "gsm8k": ("numeric", 1319, 0),
    "math500": ("latex-numeric", 500, 0),
    "mmlu_pro": ("multiple-choice", 1351, 0),
    "svamp": ("numeric", 1000, 0),
    "strategyqa": ("boolean", 687, 4),
    "theoremqa": ("latex-numeric", 800, 5),
}


class CorpusFormatError(ValueError):
    """Raised when a corpus line cannot be parsed or fails validation."""


@dataclass
class Problem:
    """One question with its gold answer.

    ``metadata`` is a flat string-to-string map; structured source fields
    (``question_type``, ``choices``) are flattened into it so downstream code
    never depends on the raw file shape.
    """

    id: str
    question: str
    answer: str
    suite: str = ""
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def choices(self) -> dict[str, str]:
        """Multiple-choice options keyed by letter, empty when not applicable."""
        out = {}
        for letter in CHOICE_LETTERS:
            key = f"choice.{letter}"
            if key in self.metadata:
                out[letter] = self.metadata[key]
        return out

    def to_json_obj(self) -> dict:
        obj: dict = {"id": self.id, "question": self.question, "answer": self.answer}
        if "question_type" in self.metadata:
            obj["question_type"] = self.metadata["question_type"]
        choices = self.choices
        if choices:
            obj["choices"] = choices
        if self.suite:
            obj["suite"] = self.suite
        for key, value in self.metadata.items():
            if key == "question_type" or key.startswith("choice."):
                continue
            obj[key] = value
        return obj


@dataclass
class CorpusSplit:
    """Disjoint train/validation partition of a corpus."""

    train: list[Problem]
    validation: list[Problem]
    seed: int


@dataclass
class TestSuite:
    """A named evaluation set with a fixed grading mode."""

    name: str
    problems: list[Problem]
    answer_kind: str
    few_shot_k: int

    @property
    def size(self) -> int:
        return len(self.problems)


@dataclass
class PreprocessRules:
    """Filter rules applied by :func:`preprocess`.

    ``require_question_type`` keeps only problems whose ``question_type``
    metadata equals the given value (``None`` disables the rule).  Answers
    matching ``rejected_answers`` (case-insensitive, stripped) are dropped,
    as are problems with empty questions.
    """

    require_question_type: str | None = "math-word-problem"
    rejected_answers: tuple[str, ...] = ("proof", "notfound", "")


@dataclass
class PreprocessResult:
    retained: list[Problem]
    dropped: Counter

    def __iter__(self):
        return iter(self.retained)

    def __len__(self) -> int:
        return len(self.retained)


def _synthesize_id(question: str) -> str:
    return "q" + hashlib.sha256(question.encode("utf-8")).hexdigest()[:12]


def _problem_from_obj(obj: dict, lineno: int) -> Problem:
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {lineno}: expected a JSON object, got {type(obj).__name__}")
    for req in ("question", "answer"):
        if req not in obj:
            raise CorpusFormatError(f"line {lineno}: missing required field {req!r}")
        if not isinstance(obj[req], str):
            raise CorpusFormatError(f"line {lineno}: field {req!r} must be a string")

    question = obj["question"]
    metadata: dict[str, str] = {}
    suite = ""
    pid = None
    for key, value in obj.items():
        if key in ("question", "answer"):
            continue
        if key == "id":
            if not isinstance(value, str) or not value:
                raise CorpusFormatError(f"line {lineno}: field 'id' must be a non-empty string")
            pid = value
        elif key == "suite":
            if not isinstance(value, str):
                raise CorpusFormatError(f"line {lineno}: field 'suite' must be a string")
            suite = value
        elif key == "question_type":
            metadata["question_type"] = str(value)
        elif key == "choices":
            if not isinstance(value, dict):
                raise CorpusFormatError(f"line {lineno}: field 'choices' must be an object")
            for letter, text in value.items():
                if letter not in CHOICE_LETTERS:
                    raise CorpusFormatError(
                        f"line {lineno}: choice letter {letter!r} outside A-{CHOICE_LETTERS[-1]}"
                    )
                metadata[f"choice.{letter}"] = str(text)
        else:
            # Unknown keys survive as strings so nothing silently vanishes.
            metadata[key] = value if isinstance(value, str) else json.dumps(value, sort_keys=True)

    return Problem(
        id=pid or _synthesize_id(question),
        question=question,
        answer=obj["answer"],
        suite=suite,
        metadata=metadata,
    )


def load_corpus(path: str | Path) -> list[Problem]:
    """Read a JSONL corpus.

    Raises :class:`CorpusFormatError` naming the offending line number on
    malformed JSON or schema violations.  Blank lines are ignored.
    """
    problems = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            problems.append(_problem_from_obj(obj, lineno))
    return problems


def serialize_corpus(problems: list[Problem], path: str | Path) -> None:
    """Write problems back out as JSONL (inverse of :func:`load_corpus`)."""
    with open(path, "w", encoding="utf-8") as fh:
        for problem in problems:
            fh.write(json.dumps(problem.to_json_obj(), ensure_ascii=False) + "\n")


def preprocess(problems: list[Problem], rules: PreprocessRules | None = None) -> PreprocessResult:
    """Apply training-corpus filters and report what was dropped.

    Returns a :class:`PreprocessResult` whose ``dropped`` counter is keyed by
    rule name (``question_type``, ``rejected_answer``, ``empty_question``).
    """
    rules = rules or PreprocessRules()
    rejected = {a.strip().lower() for a in rules.rejected_answers}
    retained = []
    dropped: Counter = Counter()
    for problem in problems:
        if not problem.question.strip():
            dropped["empty_question"] += 1
            continue
        if problem.answer.strip().lower() in rejected:
            dropped["rejected_answer"] += 1
            continue
        if rules.require_question_type is not None:
            if problem.metadata.get("question_type") != rules.require_question_type:
                dropped["question_type"] += 1
                continue
        retained.append(problem)
    return PreprocessResult(retained=retained, dropped=dropped)


def split_validation(problems: list[Problem], m: int, seed: int) -> CorpusSplit:
    """Hold out ``m`` problems for validation, deterministically.

    Selection ranks problems by ``sha256("{seed}:{id}")`` and takes the m
    smallest digests.  A hash rank rather than a stdlib PRNG keeps the split
    reproducible across platforms and Python versions; changing the seed
    changes only which problems are selected.  Train and validation partition
    the input (every problem lands in exactly one side, original order kept).
    """
    if m <= 0:
        raise ValueError(f"validation size m must be positive, got {m}")
    if m >= len(problems):
        raise ValueError(
            f"validation size m={m} must be smaller than the corpus ({len(problems)} problems)"
        )
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        dupes = [i for i, c in Counter(ids).items() if c > 1]
        raise ValueError(f"corpus has duplicate problem ids: {dupes[:5]}")

    def rank(problem: Problem) -> str:
        return hashlib.sha256(f"{seed}:{problem.id}".encode("utf-8")).hexdigest()

    chosen = {p.id for p in sorted(problems, key=rank)[:m]}
    validation = [p for p in problems if p.id in chosen]
    train = [p for p in problems if p.id not in chosen]
    return CorpusSplit(train=train, validation=validation, seed=seed)


def load_test_suite(path: str | Path, name: str) -> TestSuite:
    """Load a registered evaluation suite from JSONL.

    Unknown suite names are an error (the message lists the known ones).  A
    size mismatch against the registry is only a warning: fixtures and smoke
    subsets are legitimate, the registry size is what full suites ship with.
    """
    if name not in SUITE_REGISTRY:
        known = ", ".join(sorted(SUITE_REGISTRY))
        raise ValueError(f"unknown test suite {name!r}; known suites: {known}")
    answer_kind, expected_size, few_shot_k = SUITE_REGISTRY[name]
    problems = load_corpus(path)
    for problem in problems:
        problem.suite = name
    if len(problems) != expected_size:
        logger.warning(
            "suite %s: loaded %d problems, registry expects %d",
            name, len(problems), expected_size,
        )
    return TestSuite(name=name, problems=problems, answer_kind=answer_kind, few_shot_k=few_shot_k)
