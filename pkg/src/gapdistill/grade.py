"""Answer extraction, normalization, and scoring.

Extraction pulls a final answer out of a free-form rationale (boxed
expression, then "Final Answer:" line, then last numeric literal).
Normalization maps the raw string into one of five canonical kinds:

* ``rational`` — exact value from integers, decimals, ``\\frac{int}{int}``
  and arithmetic over them (kept as :class:`fractions.Fraction`)
* ``real``     — float from expressions involving ``\\pi`` or irrational
  square roots
* ``choice``   — a single letter A-J
* ``boolean``  — yes/no/true/false
* ``text``     — cleaned fallback when nothing else applies

Scoring compares canonicals: rationals exactly, reals within relative
1e-6 (absolute 1e-9 near zero), with one rational<->real coercion attempt.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .corpus import CHOICE_LETTERS, Problem, SUITE_REGISTRY

REL_TOL = 1e-6
ABS_TOL = 1e-9

SOURCE_BOXED = "boxed"
SOURCE_FINAL_LINE = "final_answer_line"
SOURCE_LAST_NUMBER = "last_number"
SOURCE_NONE = "none"

_NUMBER_RE = re.compile(r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|[-+]?\d*\.\d+|[-+]?\d+")
_FINAL_ANSWER_RE = re.compile(r"final\s+answer\s*:", re.IGNORECASE)
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")


# ---------------------------------------------------------------------------
# canonical values


@dataclass
class CanonicalAnswer:
    """A normalized answer: ``kind`` plus a comparison-ready value."""

    kind: str  # rational | real | choice | boolean | text
    value: object

    def to_string(self) -> str:
        if self.kind == "rational":
            return str(self.value)
        if self.kind == "real":
            return repr(self.value)
        if self.kind == "boolean":
            return "true" if self.value else "false"
        return str(self.value)


@dataclass
class ExtractedAnswer:
    raw: str | None
    canonical: CanonicalAnswer | None
    source: str


@dataclass
class GradedGeneration:
    problem_id: str
    generation: str
    extracted_raw: str | None
    extracted_canonical: str | None
    source: str
    score: int

    def to_json_obj(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "generation": self.generation,
            "extracted_raw": self.extracted_raw,
            "extracted_canonical": self.extracted_canonical,
            "source": self.source,
            "score": self.score,
        }


@dataclass
class SuiteMetrics:
    suite: str
    n: int
    correct: int | None
    accuracy: float

    @classmethod
    def from_counts(cls, suite: str, n: int, correct: int) -> "SuiteMetrics":
        if n <= 0:
            raise ValueError("n must be positive")
        return cls(suite=suite, n=n, correct=correct, accuracy=correct / n)

    def to_json_obj(self) -> dict:
        return {"suite": self.suite, "n": self.n, "correct": self.correct, "accuracy": self.accuracy}


# ---------------------------------------------------------------------------
# the arithmetic grammar behind numeric normalization
#
# expr   := term (('+'|'-') term)*
# term   := factor (('*'|'/'|implicit) factor)*
# factor := '-' factor | atom
# atom   := number | \pi | \frac{expr}{expr} | \sqrt{expr} | '(' expr ')' | '{' expr '}'
#
# Exactness is preserved through Fraction arithmetic; pi or an irrational
# square root degrades the value to float.


class _ParseError(ValueError):
    pass


_TOKEN_RE = re.compile(
    r"\s+"
    r"|(?P<number>\d+\.\d+|\.\d+|\d+)"
    r"|(?P<cmd>\\[a-zA-Z]+)"
    r"|(?P<op>[-+*/(){}−×⋅])"
)

_CMD_ALIASES = {
    "\\frac": "frac",
    "\\dfrac": "frac",
    "\\tfrac": "frac",
    "\\sqrt": "sqrt",
    "\\pi": "pi",
    "\\times": "*",
    "\\cdot": "*",
    "\\div": "/",
}
_OP_ALIASES = {"−": "-", "×": "*", "⋅": "*"}


def _tokenize(s: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(s):
        m = _TOKEN_RE.match(s, pos)
        if m is None:
            raise _ParseError(f"unexpected character {s[pos]!r}")
        pos = m.end()
        if m.lastgroup == "number":
            tokens.append(("number", m.group("number")))
        elif m.lastgroup == "cmd":
            cmd = m.group("cmd")
            if cmd not in _CMD_ALIASES:
                raise _ParseError(f"unsupported command {cmd}")
            alias = _CMD_ALIASES[cmd]
            tokens.append(("op", alias) if alias in "*/" else (alias, alias))
        elif m.lastgroup == "op":
            op = m.group("op")
            tokens.append(("op", _OP_ALIASES.get(op, op)))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: str | None = None, value: str | None = None) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise _ParseError("unexpected end of input")
        if kind is not None and tok[0] != kind:
            raise _ParseError(f"expected {kind}, got {tok}")
        if value is not None and tok[1] != value:
            raise _ParseError(f"expected {value!r}, got {tok}")
        self.pos += 1
        return tok

    # -- arithmetic helpers ------------------------------------------------

    @staticmethod
    def _add(a, b):
        if isinstance(a, Fraction) and isinstance(b, Fraction):
            return a + b
        return float(a) + float(b)

    @staticmethod
    def _sub(a, b):
        if isinstance(a, Fraction) and isinstance(b, Fraction):
            return a - b
        return float(a) - float(b)

    @staticmethod
    def _mul(a, b):
        if isinstance(a, Fraction) and isinstance(b, Fraction):
            return a * b
        return float(a) * float(b)

    @staticmethod
    def _div(a, b):
        if isinstance(a, Fraction) and isinstance(b, Fraction):
            if b == 0:
                raise _ParseError("division by zero")
            return a / b
        fb = float(b)
        if fb == 0.0:
            raise _ParseError("division by zero")
        return float(a) / fb

    @staticmethod
    def _sqrt(a):
        if isinstance(a, Fraction):
            if a < 0:
                raise _ParseError("square root of a negative value")
            num = math.isqrt(a.numerator)
            den = math.isqrt(a.denominator)
            if num * num == a.numerator and den * den == a.denominator:
                return Fraction(num, den)
            return math.sqrt(float(a))
        if a < 0:
            raise _ParseError("square root of a negative value")
        return math.sqrt(a)

    # -- grammar -----------------------------------------------------------

    def parse(self):
        value = self.expr()
        if self.peek() is not None:
            raise _ParseError(f"trailing tokens at {self.peek()}")
        if isinstance(value, float) and not math.isfinite(value):
            raise _ParseError("non-finite value")
        return value

    def expr(self):
        value = self.term()
        while (tok := self.peek()) in (("op", "+"), ("op", "-")):
            self.take()
            rhs = self.term()
            value = self._add(value, rhs) if tok[1] == "+" else self._sub(value, rhs)
        return value

    _ATOM_STARTS = {"number", "pi", "frac", "sqrt"}

    def _starts_atom(self, tok: tuple[str, str]) -> bool:
        return tok[0] in self._ATOM_STARTS or tok == ("op", "(") or tok == ("op", "{")

    def term(self):
        value = self.factor()
        while (tok := self.peek()) is not None:
            if tok == ("op", "*") or tok == ("op", "/"):
                self.take()
                rhs = self.factor()
                value = self._mul(value, rhs) if tok[1] == "*" else self._div(value, rhs)
            elif self._starts_atom(tok):
                value = self._mul(value, self.factor())  # implicit product, e.g. 2\pi
            else:
                break
        return value

    def factor(self):
        tok = self.peek()
        if tok == ("op", "-"):
            self.take()
            value = self.factor()
            return -value if isinstance(value, Fraction) else -float(value)
        if tok == ("op", "+"):
            self.take()
            return self.factor()
        return self.atom()

    def atom(self):
        tok = self.peek()
        if tok is None:
            raise _ParseError("unexpected end of input")
        if tok[0] == "number":
            self.take()
            return Fraction(tok[1])
        if tok[0] == "pi":
            self.take()
            return math.pi
        if tok[0] == "frac":
            self.take()
            num = self._braced()
            den = self._braced()
            return self._div(num, den)
        if tok[0] == "sqrt":
            self.take()
            if self.peek() == ("op", "{"):
                return self._sqrt(self._braced())
            return self._sqrt(self.atom())
        if tok == ("op", "("):
            self.take()
            value = self.expr()
            self.take("op", ")")
            return value
        if tok == ("op", "{"):
            return self._braced()
        raise _ParseError(f"unexpected token {tok}")

    def _braced(self):
        self.take("op", "{")
        value = self.expr()
        self.take("op", "}")
        return value


def _evaluate_numeric(s: str):
    """Evaluate the arithmetic grammar; raises _ParseError when s is not in it."""
    value = _Parser(_tokenize(s)).parse()
    return value


# ---------------------------------------------------------------------------
# normalization


def _clean(raw: str) -> str:
    s = raw.strip()
    s = s.replace("$", "")
    s = s.replace("\\left", "").replace("\\right", "")
    s = _THOUSANDS_RE.sub("", s)
    s = re.sub(r"\s+", " ", s).strip()
    # unwrap a fully enclosing pair of parentheses, e.g. "(C)" -> "C"
    while len(s) >= 2 and s[0] == "(" and s[-1] == ")":
        depth = 0
        wraps = True
        for i, ch in enumerate(s):
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth == 0 and i != len(s) - 1:
                    wraps = False
                    break
        if not wraps:
            break
        s = s[1:-1].strip()
    if s.endswith("."):
        s = s[:-1].rstrip()
    return s


def normalize_answer(raw: str) -> CanonicalAnswer:
    """Map a raw answer string to its canonical form.

    Parse attempts run in a fixed order (boolean, choice letter, arithmetic
    grammar, text fallback) so the result is deterministic.
    """
    s = _clean(raw)
    low = s.lower()
    if low in ("yes", "true"):
        return CanonicalAnswer("boolean", True)
    if low in ("no", "false"):
        return CanonicalAnswer("boolean", False)
    if len(s) == 1 and s.upper() in CHOICE_LETTERS:
        return CanonicalAnswer("choice", s.upper())
    try:
        value = _evaluate_numeric(s)
    except _ParseError:
        return CanonicalAnswer("text", s)
    if isinstance(value, Fraction):
        return CanonicalAnswer("rational", value)
    return CanonicalAnswer("real", value)


# ---------------------------------------------------------------------------
# extraction


def _last_boxed_content(text: str) -> str | None:
    marker = "\\boxed{"
    start = len(text)
    while True:
        start = text.rfind(marker, 0, start)
        if start == -1:
            return None
        depth = 1
        i = start + len(marker)
        while i < len(text):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start + len(marker):i]
            i += 1
        # unbalanced: try an earlier occurrence


def extract_final_answer(text: str) -> ExtractedAnswer:
    """Extract the final answer from a rationale.

    Priority: last ``\\boxed{...}`` (balanced braces), then the text after
    the last "Final Answer:" marker, then the last numeric literal, else a
    null result with source ``none``.
    """
    boxed = _last_boxed_content(text)
    if boxed is not None and boxed.strip():
        raw = boxed.strip()
        return ExtractedAnswer(raw, normalize_answer(raw), SOURCE_BOXED)

    matches = list(_FINAL_ANSWER_RE.finditer(text))
    if matches:
        tail = text[matches[-1].end():]
        line = tail.split("\n", 1)[0].strip()
        line = line.strip(" $")
        line = line.rstrip(" .!?,;:")
        inner = _last_boxed_content(line)
        if inner is not None:
            line = inner.strip()
        if line:
            return ExtractedAnswer(line, normalize_answer(line), SOURCE_FINAL_LINE)

    numbers = _NUMBER_RE.findall(text)
    if numbers:
        raw = numbers[-1]
        return ExtractedAnswer(raw, normalize_answer(raw), SOURCE_LAST_NUMBER)

    return ExtractedAnswer(None, None, SOURCE_NONE)


# ---------------------------------------------------------------------------
# scoring


def _floats_match(a: float, b: float) -> bool:
    return abs(a - b) <= max(ABS_TOL, REL_TOL * max(abs(a), abs(b)))


def _match_canonical(a: CanonicalAnswer, b: CanonicalAnswer) -> bool:
    if a.kind == b.kind:
        if a.kind == "rational":
            return a.value == b.value
        if a.kind == "real":
            return _floats_match(a.value, b.value)
        return a.value == b.value
    # one cross-kind coercion attempt: rational <-> real compare as floats
    numeric = {"rational", "real"}
    if a.kind in numeric and b.kind in numeric:
        return _floats_match(float(a.value), float(b.value))
    return False


def _resolve_choice_letter(ans: CanonicalAnswer, choices: dict[str, str]) -> str | None:
    """Map an extracted answer onto a choice letter via the option texts."""
    if ans.kind == "choice":
        return ans.value if ans.value in choices else None
    hits = [
        letter for letter, text in choices.items()
        if _match_canonical(ans, normalize_answer(text))
    ]
    return hits[0] if len(hits) == 1 else None


def score(
    extracted,
    gold,
    kind: str = "latex-numeric",
    choices: dict[str, str] | None = None,
) -> int:
    """Return 1 when the extracted answer matches gold, else 0.

    ``extracted`` may be an :class:`ExtractedAnswer`, a
    :class:`CanonicalAnswer`, a raw string, or ``None`` (scores 0).
    ``gold`` is the gold answer text or its canonical form.  For
    ``multiple-choice`` grading, ``choices`` lets option text stand in for
    its letter.
    """
    if isinstance(extracted, ExtractedAnswer):
        extracted = extracted.canonical
    if extracted is None:
        return 0
    if isinstance(extracted, str):
        extracted = normalize_answer(extracted)
    if isinstance(gold, str):
        gold = normalize_answer(gold)

    if kind == "multiple-choice" and choices:
        if gold.kind == "choice":
            letter = _resolve_choice_letter(extracted, choices)
            return int(letter == gold.value)
        # gold given as option text: canonical comparison below still applies

    return int(_match_canonical(extracted, gold))


def answer_kind_for_suite(suite: str) -> str:
    if suite in SUITE_REGISTRY:
        return SUITE_REGISTRY[suite][0]
    return "latex-numeric"


def grade_batch(
    generations: list[tuple[str, str]],
    problems: list[Problem],
    answer_kind: str | None = None,
) -> list[GradedGeneration]:
    """Grade ``(problem_id, generation)`` pairs against their problems.

    Output aligns index-wise with the input.  Unknown problem ids are an
    error; the grading kind comes from ``answer_kind`` when given, else from
    the problem's suite registry entry, else ``latex-numeric``.
    """
    by_id = {p.id: p for p in problems}
    graded = []
    for problem_id, generation in generations:
        if problem_id not in by_id:
            raise ValueError(f"generation references unknown problem id {problem_id!r}")
        problem = by_id[problem_id]
        kind = answer_kind or answer_kind_for_suite(problem.suite)
        extracted = extract_final_answer(generation)
        item_score = score(extracted, problem.answer, kind=kind, choices=problem.choices or None)
        graded.append(
            GradedGeneration(
                problem_id=problem_id,
                generation=generation,
                extracted_raw=extracted.raw,
                extracted_canonical=(
                    extracted.canonical.to_string() if extracted.canonical else None
                ),
                source=extracted.source,
                score=item_score,
            )
        )
    return graded


def accuracy(graded: list[GradedGeneration], suite: str = "") -> SuiteMetrics:
    """Fold graded generations into per-suite counts."""
    if not graded:
        raise ValueError("cannot compute accuracy of an empty grading list")
    correct = sum(g.score for g in graded)
    return SuiteMetrics.from_counts(suite=suite, n=len(graded), correct=correct)


def weighted_average(metrics) -> float:
    """Size-weighted mean accuracy: sum(acc_i * n_i) / sum(n_i).

    Accepts :class:`SuiteMetrics` objects or ``(accuracy, n)`` pairs; the
    scale of ``accuracy`` (fraction or percent) passes through unchanged.
    """
    total = 0.0
    weight = 0
    for item in metrics:
        if isinstance(item, SuiteMetrics):
            acc, n = item.accuracy, item.n
        else:
            acc, n = item
        if n <= 0:
            raise ValueError("suite sizes must be positive")
        total += acc * n
        weight += n
    if weight == 0:
        raise ValueError("cannot average an empty metrics list")
    return total / weight


def significance(
    baseline: list[GradedGeneration], candidate: list[GradedGeneration]
) -> float:
    """Exact McNemar test on paired per-item scores.

    With b = problems the baseline got right and the candidate wrong, and
    c = the reverse, the p-value is the two-sided exact binomial tail of
    min(b, c) out of b + c at rate 1/2 (p = 1 when b + c = 0).  Computed in
    exact arithmetic before conversion to float.
    """
    if len(baseline) != len(candidate):
        raise ValueError(
            f"paired gradings differ in length: {len(baseline)} vs {len(candidate)}"
        )
    for i, (bg, cg) in enumerate(zip(baseline, candidate)):
        if bg.problem_id != cg.problem_id:
            raise ValueError(
                f"paired gradings disagree at index {i}: "
                f"{bg.problem_id!r} vs {cg.problem_id!r}"
            )
    b = sum(1 for bg, cg in zip(baseline, candidate) if bg.score == 1 and cg.score == 0)
    c = sum(1 for bg, cg in zip(baseline, candidate) if bg.score == 0 and cg.score == 1)
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    p = 2 * Fraction(tail, 2**n)
    return float(min(Fraction(1), p))


# ---------------------------------------------------------------------------
# graded JSONL io


def write_graded(graded: list[GradedGeneration], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graded:
            fh.write(json.dumps(g.to_json_obj(), ensure_ascii=False) + "\n")


def read_graded(path: str | Path) -> list[GradedGeneration]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            out.append(
                GradedGeneration(
                    problem_id=obj["problem_id"],
                    generation=obj["generation"],
                    extracted_raw=obj.get("extracted_raw"),
                    extracted_canonical=obj.get("extracted_canonical"),
                    source=obj.get("source", SOURCE_NONE),
                    score=int(obj["score"]),
                )
            )
    return out

