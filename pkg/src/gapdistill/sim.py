"""Desk-scale simulator: the distillation loop over explicit categoricals.

Rationale distributions are small categoricals, so KL divergence, entropy,
and cross-entropy are computed exactly (no sampling, no estimation) and the
student update is a geometric interpolation toward the round's teacher
target:

    student'  ∝  student^(1-alpha) * teacher^alpha

with ``alpha`` the fit strength (1.0 = the student copies the teacher).  A
question counts as correct when the student puts at least half its mass on
correct rationales.  The teacher is gap-conditioned: it serves a different
distribution depending on whether the student currently has the question
right.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

GAP_CORRECT = "correct"
GAP_INCORRECT = "incorrect"


class InfiniteDivergenceError(ValueError):
    """KL(p||q) with q = 0 somewhere p > 0 diverges."""


@dataclass(frozen=True)
class Categorical:
    outcomes: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.outcomes) != len(self.probs):
            raise ValueError("outcomes and probs must have equal length")
        if not self.outcomes:
            raise ValueError("empty categorical")
        if any(p < 0 for p in self.probs):
            raise ValueError("negative probability")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, not 1")

    @classmethod
    def normalized(cls, outcomes, weights) -> "Categorical":
        total = float(sum(weights))
        if total <= 0:
            raise ValueError("cannot normalize non-positive total mass")
        return cls(tuple(outcomes), tuple(w / total for w in weights))

    def prob_of(self, outcome: str) -> float:
        try:
            return self.probs[self.outcomes.index(outcome)]
        except ValueError:
            return 0.0

    def mass_on(self, outcomes) -> float:
        wanted = set(outcomes)
        return sum(p for o, p in zip(self.outcomes, self.probs) if o in wanted)


def _aligned_probs(p, q) -> tuple[list[float], list[float]]:
    if isinstance(p, Categorical) and isinstance(q, Categorical):
        if p.outcomes != q.outcomes:
            raise ValueError("categoricals must share the same outcome order")
        return list(p.probs), list(q.probs)
    p_list, q_list = list(p), list(q)
    if len(p_list) != len(q_list):
        raise ValueError("probability vectors must have equal length")
    return p_list, q_list


def exact_kl(p, q) -> float:
    """KL(p || q) = sum_i p_i ln(p_i / q_i), computed exactly over the support.

    Terms with p_i = 0 contribute nothing; q_i = 0 where p_i > 0 raises
    :class:`InfiniteDivergenceError`.
    """
    p_probs, q_probs = _aligned_probs(p, q)
    total = 0.0
    for pi, qi in zip(p_probs, q_probs):
        if pi == 0.0:
            continue
        if qi == 0.0:
            raise InfiniteDivergenceError("q assigns zero mass where p is positive")
        total += pi * math.log(pi / qi)
    return total


def entropy(p) -> float:
    probs = list(p.probs) if isinstance(p, Categorical) else list(p)
    return -sum(pi * math.log(pi) for pi in probs if pi > 0.0)


def cross_entropy(p, q) -> float:
    """H(p, q) = -sum_i p_i ln q_i."""
    p_probs, q_probs = _aligned_probs(p, q)
    total = 0.0
    for pi, qi in zip(p_probs, q_probs):
        if pi == 0.0:
            continue
        if qi == 0.0:
            raise InfiniteDivergenceError("q assigns zero mass where p is positive")
        total -= pi * math.log(qi)
    return total


def sample_categorical(q: Categorical, n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    return rng.choices(q.outcomes, weights=q.probs, k=n)


def empirical_nll(q, samples) -> float:
    """Mean negative log-likelihood of drawn samples under q."""
    if not samples:
        raise ValueError("empirical_nll needs at least one sample")
    if isinstance(q, Categorical):
        lookup = {o: p for o, p in zip(q.outcomes, q.probs)}
    else:
        raise TypeError("empirical_nll expects a Categorical")
    total = 0.0
    for sample in samples:
        prob = lookup.get(sample, 0.0)
        if prob <= 0.0:
            raise InfiniteDivergenceError(f"sample {sample!r} has zero probability under q")
        total -= math.log(prob)
    return total / len(samples)


def kl_nll_identity_check(p, q) -> float:
    """Residual of the identity (H(p,q) - H(p)) = KL(p||q); ~0 up to roundoff."""
    return abs((cross_entropy(p, q) - entropy(p)) - exact_kl(p, q))


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class ScenarioQuestion:
    name: str
    support: tuple[str, ...]
    correct: frozenset
    student: Categorical
    teacher: dict  # gap summary -> Categorical


@dataclass
class ToyScenario:
    fit_strength: float
    questions: list[ScenarioQuestion]


def scenario_from_obj(obj: dict) -> ToyScenario:
    try:
        fit_strength = float(obj["fit_strength"])
        raw_questions = obj["questions"]
    except KeyError as exc:
        raise ValueError(f"scenario missing field {exc.args[0]!r}") from exc
    if not 0.0 < fit_strength <= 1.0:
        raise ValueError(f"fit_strength must be in (0, 1], got {fit_strength}")
    if not raw_questions:
        raise ValueError("scenario has no questions")
    questions = []
    for i, raw in enumerate(raw_questions):
        try:
            name = raw.get("name", f"q{i + 1}")
            support = tuple(raw["support"])
            correct = frozenset(raw["correct"])
            student = Categorical(support, tuple(float(x) for x in raw["student"]))
            teacher = {
                gap: Categorical(support, tuple(float(x) for x in probs))
                for gap, probs in raw["teacher"].items()
            }
        except KeyError as exc:
            raise ValueError(f"question {i}: missing field {exc.args[0]!r}") from exc
        if not correct:
            raise ValueError(f"question {name}: no correct rationale designated")
        if not correct <= set(support):
            raise ValueError(f"question {name}: correct outcomes outside the support")
        if fit_strength < 1.0 and any(p == 0.0 for p in student.probs):
            # a support hole survives every partial update and makes the
            # recorded KL infinite, so reject it up front
            raise ValueError(
                f"question {name}: student must have full support when fit_strength < 1"
            )
        for gap in (GAP_CORRECT, GAP_INCORRECT):
            if gap not in teacher:
                raise ValueError(f"question {name}: teacher missing {gap!r} distribution")
            if teacher[gap].mass_on(correct) <= 0.0:
                raise ValueError(
                    f"question {name}: teacher ({gap}) puts no mass on any correct rationale"
                )
        questions.append(
            ScenarioQuestion(
                name=name, support=support, correct=correct, student=student, teacher=teacher
            )
        )
    return ToyScenario(fit_strength=fit_strength, questions=questions)


def load_scenario(path: str | Path) -> ToyScenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_obj(json.load(fh))


# ---------------------------------------------------------------------------
# the loop at distribution level


@dataclass
class TrajectoryRow:
    iteration: int
    question: str
    kl: float
    accuracy: float


def _is_correct(student: Categorical, correct) -> bool:
    return student.mass_on(correct) >= 0.5


def geometric_update(student: Categorical, teacher: Categorical, alpha: float) -> Categorical:
    """normalize(student^(1-alpha) * teacher^alpha), elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    weights = [
        (s ** (1.0 - alpha)) * (t ** alpha)
        for s, t in zip(student.probs, teacher.probs)
    ]
    return Categorical.normalized(student.outcomes, weights)


def simulate(scenario: ToyScenario, rounds: int) -> list[TrajectoryRow]:
    """Run the gap-conditioned loop for ``rounds`` rounds.

    Per round and question: score the current student, pick the teacher
    distribution for that gap, interpolate the student toward it, and record
    KL(teacher || updated student) alongside the round's aggregate accuracy.
    """
    return _run(scenario, rounds, gap_conditioned=True)


def simulate_standard(scenario: ToyScenario, rounds: int) -> list[TrajectoryRow]:
    """Same loop with the unconditioned teacher (its ``correct`` distribution
    regardless of the student's state) — plain repeated distillation."""
    return _run(scenario, rounds, gap_conditioned=False)


def _run(scenario: ToyScenario, rounds: int, gap_conditioned: bool) -> list[TrajectoryRow]:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    students = {q.name: q.student for q in scenario.questions}
    rows: list[TrajectoryRow] = []
    for k in range(1, rounds + 1):
        updated = {}
        kls = {}
        for q in scenario.questions:
            current = students[q.name]
            if gap_conditioned:
                gap = GAP_CORRECT if _is_correct(current, q.correct) else GAP_INCORRECT
            else:
                gap = GAP_CORRECT
            target = q.teacher[gap]
            new_student = geometric_update(current, target, scenario.fit_strength)
            updated[q.name] = new_student
            kls[q.name] = exact_kl(target, new_student)
        students = updated
        accuracy = sum(
            1 for q in scenario.questions if _is_correct(students[q.name], q.correct)
        ) / len(scenario.questions)
        for q in scenario.questions:
            rows.append(TrajectoryRow(iteration=k, question=q.name, kl=kls[q.name], accuracy=accuracy))
    return rows


def write_trajectory_csv(rows: list[TrajectoryRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "question", "kl", "accuracy"])
        for row in rows:
            writer.writerow([row.iteration, row.question, f"{row.kl:.12g}", f"{row.accuracy:.6g}"])
