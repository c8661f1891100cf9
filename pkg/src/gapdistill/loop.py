"""Iteration controller: runs the distillation loop end to end.

A run lives in one directory.  Round ``k`` owns ``iter_k/`` with a fixed
artifact order (teacher data, checkpoint, validation scores, student
training-set generations, test metrics, round record); the run manifest is
rewritten last after each round.  Every file is written atomically
(temp + rename), and the manifest contains only deterministic content —
wall-clock and other volatile bookkeeping go into each round's
``round.json`` — so an interrupted run resumed to completion produces a
manifest byte-identical to an uninterrupted one.

Round 1 is plain distillation: the teacher answers every training and
validation question cold, answer-mismatched training rationales are
dropped, and the student is tuned on what remains.  Every later round
regenerates the teacher data conditioned on how the previous student
actually failed: prompts carry the question, the teacher's previous
rationale, the student's previous attempt, and scored validation history.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

from .backends import (
    BackendError,
    BackendHandle,
    CheckpointHandle,
    FineTuneJob,
    GenerationParams,
    HttpTrainer,
    SubprocessTrainer,
    ToyStudentBackend,
    ToyTrainer,
    batch_generate,
    create_backend,
    dataset_digest,
    fine_tune,
    read_training_file,
    write_training_file,
)
from .corpus import CorpusSplit, Problem, load_corpus, load_test_suite, split_validation
from .evaluation import build_report, emit_plot_series, evaluate_suite, render_table
from .grade import (
    GradedGeneration,
    SuiteMetrics,
    accuracy,
    answer_kind_for_suite,
    extract_final_answer,
    grade_batch,
    read_graded,
    score,
    write_graded,
)
from .prompts import (
    GapContext,
    ValidationExample,
    ValidationHistoryEntry,
    build_gap_prompt,
    build_initial_teacher_prompt,
    build_student_prompt,
    check_budget,
    drop_oldest_round,
    load_template,
)

logger = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = (
    "Solve the following problem step by step, then state the result on a "
    "final line formatted as 'Final Answer: <answer>'."
)

MANIFEST_NAME = "manifest.json"
FAILED_MARKER = "FAILED"
REPORT_NAME = "report.txt"
PLOT_SERIES_NAME = "plot_series.csv"
FINAL_DATASET_NAME = "final_dataset.jsonl"

TEACHER_DATA = "teacher_data.jsonl"
VAL_TEACHER = "val_teacher.jsonl"
CHECKPOINT = "checkpoint.json"
VAL_SCORES = "val_scores.jsonl"
STUDENT_TRAIN_GENS = "student_train_gens.jsonl"
TEST_METRICS = "test_metrics.json"
ROUND_RECORD = "round.json"

STOP_SATURATED = "saturated"
STOP_K_MAX = "k_max"


class ContextBudgetExceededError(RuntimeError):
    """A regeneration prompt did not fit the context budget."""

    def __init__(self, problem_id: str, estimated: int, budget: int):
        self.problem_id = problem_id
        self.estimated = estimated
        self.budget = budget
        self.exceeded_by = estimated - budget
        super().__init__(
            f"prompt for {problem_id} needs {estimated} tokens, budget is "
            f"{budget}: over by {self.exceeded_by}"
        )


class EmptyDatasetError(RuntimeError):
    """Filtering left no usable training records."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SuiteSpec:
    name: str
    path: str
    few_shot_path: str = ""


@dataclass
class RunConfig:
    run_dir: str
    corpus_path: str = ""
    seed: int = 0
    K_max: int = 4
    m: int = 20
    patience: int = 1
    epochs_schedule: list[int] = field(default_factory=lambda: [5, 3, 3, 3])
    instruction: str = DEFAULT_INSTRUCTION
    context_budget: int = 8192
    chars_per_token: int = 4
    prune_oldest: bool = False
    parallelism: int = 1
    template_dir: str = ""
    teacher: BackendHandle | None = None
    student: BackendHandle | None = None
    trainer: dict = field(default_factory=lambda: {"kind": "toy"})
    teacher_sampling: GenerationParams = field(
        default_factory=lambda: GenerationParams(temperature=0.7)
    )
    student_eval_sampling: GenerationParams = field(
        default_factory=lambda: GenerationParams(temperature=0.0)
    )
    test_suites: list[SuiteSpec] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        """Canonical config dict as recorded in the manifest.

        ``run_dir`` is deliberately omitted: the manifest lives inside the
        run directory, and recording the path would make otherwise
        identical runs compare unequal.
        """
        return {
            "corpus_path": self.corpus_path,
            "seed": self.seed,
            "K_max": self.K_max,
            "m": self.m,
            "patience": self.patience,
            "epochs_schedule": list(self.epochs_schedule),
            "instruction": self.instruction,
            "context_budget": self.context_budget,
            "chars_per_token": self.chars_per_token,
            "prune_oldest": self.prune_oldest,
            "parallelism": self.parallelism,
            "template_dir": self.template_dir,
            "teacher": _handle_obj(self.teacher),
            "student": _handle_obj(self.student),
            "trainer": dict(self.trainer),
            "teacher_sampling": self.teacher_sampling.to_json_obj(),
            "student_eval_sampling": self.student_eval_sampling.to_json_obj(),
            "test_suites": [
                {"name": s.name, "path": s.path, "few_shot_path": s.few_shot_path}
                for s in self.test_suites
            ],
        }


def _handle_obj(handle: BackendHandle | None) -> dict | None:
    if handle is None:
        return None
    return {
        "kind": handle.kind,
        "model_name": handle.model_name,
        "endpoint": handle.endpoint,
        "options": dict(handle.options),
    }


def _handle_from_obj(obj: dict, where: str, errors: list[str]) -> BackendHandle | None:
    if obj is None:
        return None
    allowed = {"kind", "model_name", "endpoint", "options"}
    for key in obj:
        if key not in allowed:
            errors.append(f"unknown key {key!r} in {where}")
    if "kind" not in obj:
        errors.append(f"{where} is missing 'kind'")
        return None
    return BackendHandle(
        kind=obj["kind"],
        model_name=obj.get("model_name", ""),
        endpoint=obj.get("endpoint", ""),
        options=dict(obj.get("options", {})),
    )


def _params_from_obj(obj: dict, where: str, errors: list[str], default: GenerationParams) -> GenerationParams:
    allowed = {"temperature", "max_tokens", "stop", "seed"}
    for key in obj:
        if key not in allowed:
            errors.append(f"unknown key {key!r} in {where}")
    return GenerationParams(
        temperature=obj.get("temperature", default.temperature),
        max_tokens=obj.get("max_tokens", default.max_tokens),
        stop=tuple(obj.get("stop", default.stop)),
        seed=obj.get("seed", default.seed),
    )


_TOP_LEVEL_KEYS = {
    "run_dir",
    "corpus_path",
    "seed",
    "K_max",
    "m",
    "patience",
    "epochs_schedule",
    "instruction",
    "context_budget",
    "chars_per_token",
    "prune_oldest",
    "parallelism",
    "template_dir",
    "teacher",
    "student",
    "trainer",
    "teacher_sampling",
    "student_eval_sampling",
    "test_suites",
}

_TRAINER_KINDS = {"toy", "http", "subprocess"}


def parse_run_config(obj: dict, run_dir: str | None = None) -> tuple[RunConfig, dict[str, str]]:
    """Build a validated :class:`RunConfig` from a plain dict.

    Rejects unknown keys anywhere (a typo'd option must fail loudly, not
    silently fall back to a default) and returns a per-field provenance map
    of ``"user"`` / ``"default"`` so the manifest records which values were
    actually chosen versus inherited.
    """
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    errors = [f"unknown key {key!r}" for key in obj if key not in _TOP_LEVEL_KEYS]

    defaults = RunConfig(run_dir="")
    provenance: dict[str, str] = {}

    def pick(key, default):
        provenance[key] = "user" if key in obj else "default"
        return obj.get(key, default)

    config = RunConfig(
        run_dir=run_dir if run_dir is not None else obj.get("run_dir", ""),
        corpus_path=pick("corpus_path", defaults.corpus_path),
        seed=pick("seed", defaults.seed),
        K_max=pick("K_max", defaults.K_max),
        m=pick("m", defaults.m),
        patience=pick("patience", defaults.patience),
        epochs_schedule=list(pick("epochs_schedule", defaults.epochs_schedule)),
        instruction=pick("instruction", defaults.instruction),
        context_budget=pick("context_budget", defaults.context_budget),
        chars_per_token=pick("chars_per_token", defaults.chars_per_token),
        prune_oldest=pick("prune_oldest", defaults.prune_oldest),
        parallelism=pick("parallelism", defaults.parallelism),
        template_dir=pick("template_dir", defaults.template_dir),
    )
    provenance["run_dir"] = "user" if (run_dir is not None or "run_dir" in obj) else "default"

    if "teacher" in obj:
        provenance["teacher"] = "user"
        config.teacher = _handle_from_obj(obj["teacher"], "teacher", errors)
    else:
        provenance["teacher"] = "default"
    if "student" in obj:
        provenance["student"] = "user"
        config.student = _handle_from_obj(obj["student"], "student", errors)
    else:
        provenance["student"] = "default"

    trainer = pick("trainer", defaults.trainer)
    if not isinstance(trainer, dict) or "kind" not in trainer:
        errors.append("trainer must be an object with a 'kind'")
    elif trainer["kind"] not in _TRAINER_KINDS:
        errors.append(
            f"unknown trainer kind {trainer['kind']!r} (known: {sorted(_TRAINER_KINDS)})"
        )
    else:
        config.trainer = dict(trainer)

    if "teacher_sampling" in obj:
        provenance["teacher_sampling"] = "user"
        config.teacher_sampling = _params_from_obj(
            obj["teacher_sampling"], "teacher_sampling", errors, defaults.teacher_sampling
        )
    else:
        provenance["teacher_sampling"] = "default"
    if "student_eval_sampling" in obj:
        provenance["student_eval_sampling"] = "user"
        config.student_eval_sampling = _params_from_obj(
            obj["student_eval_sampling"],
            "student_eval_sampling",
            errors,
            defaults.student_eval_sampling,
        )
    else:
        provenance["student_eval_sampling"] = "default"

    suites = pick("test_suites", [])
    parsed_suites = []
    for i, entry in enumerate(suites):
        if not isinstance(entry, dict):
            errors.append(f"test_suites[{i}] must be an object")
            continue
        for key in entry:
            if key not in {"name", "path", "few_shot_path"}:
                errors.append(f"unknown key {key!r} in test_suites[{i}]")
        if "name" not in entry or "path" not in entry:
            errors.append(f"test_suites[{i}] needs 'name' and 'path'")
            continue
        parsed_suites.append(
            SuiteSpec(
                name=entry["name"],
                path=entry["path"],
                few_shot_path=entry.get("few_shot_path", ""),
            )
        )
    config.test_suites = parsed_suites

    errors.extend(_validate_numbers(config))
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    return config, provenance


def _validate_numbers(config: RunConfig) -> list[str]:
    errors = []
    if config.K_max < 1:
        errors.append("K_max must be >= 1")
    if config.m < 1:
        errors.append("m must be >= 1")
    if config.patience < 1:
        errors.append("patience must be >= 1")
    if not config.epochs_schedule:
        errors.append("epochs_schedule must not be empty")
    elif any(not isinstance(e, int) or e < 1 for e in config.epochs_schedule):
        errors.append("epochs_schedule entries must be integers >= 1")
    if config.context_budget < 1:
        errors.append("context_budget must be >= 1")
    if config.chars_per_token < 1:
        errors.append("chars_per_token must be >= 1")
    if config.parallelism < 1:
        errors.append("parallelism must be >= 1")
    return errors


def epochs_for_round(config: RunConfig, k: int) -> int:
    """Epoch count for round ``k`` (1-based); the schedule's last entry
    repeats once the schedule runs out."""
    schedule = config.epochs_schedule
    return schedule[min(k - 1, len(schedule) - 1)]


# ---------------------------------------------------------------------------
# atomic file IO


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json_atomic(path: Path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_jsonl_atomic(path: Path, rows: list[dict]) -> None:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    write_text_atomic(path, text)


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceDecision:
    stop: bool
    best_k: int
    reason: str | None = None


def check_convergence(
    accuracies: list[float], patience: int = 1, K_max: int = 4
) -> ConvergenceDecision:
    """Decide whether to run another round given validation accuracy history.

    ``best_k`` is the earliest round attaining the maximum.  The run stops
    when ``K_max`` rounds have completed, or when the last ``patience``
    rounds all failed to strictly improve on the best seen before them.
    """
    if not accuracies:
        raise ValueError("need at least one completed round")
    best = max(accuracies)
    best_k = accuracies.index(best) + 1
    k = len(accuracies)
    if k >= K_max:
        return ConvergenceDecision(True, best_k, STOP_K_MAX)
    stalled = 0
    for i in range(k - 1, -1, -1):
        prior_best = max(accuracies[:i]) if i > 0 else float("-inf")
        if accuracies[i] <= prior_best:
            stalled += 1
        else:
            break
    if stalled >= patience:
        return ConvergenceDecision(True, best_k, STOP_SATURATED)
    return ConvergenceDecision(False, best_k, None)


# ---------------------------------------------------------------------------
# filtering


def filter_teacher_records(
    problems: list[Problem],
    rationales: list[str],
    instruction: str,
    answer_kind: str | None = None,
) -> tuple[list[tuple[str, str, str]], int]:
    """Keep only rationales whose extracted final answer matches the gold
    answer; returns (training records, discarded count)."""
    if len(problems) != len(rationales):
        raise ValueError("one rationale per problem required")
    records = []
    discarded = 0
    for problem, rationale in zip(problems, rationales):
        kind = answer_kind or answer_kind_for_suite(problem.suite)
        extracted = extract_final_answer(rationale)
        if score(extracted, problem.answer, kind=kind, choices=problem.choices) == 1:
            records.append((problem.question, rationale, instruction))
        else:
            discarded += 1
    return records, discarded


# ---------------------------------------------------------------------------
# runtime wiring


@dataclass
class Runtime:
    """Live backends for one run; config describes them, this holds them."""

    teacher: object
    student: object
    trainer: object
    initial_checkpoint: CheckpointHandle


def build_runtime(config: RunConfig) -> Runtime:
    if config.teacher is None or config.student is None:
        raise ValueError("config must define teacher and student backends")
    teacher = create_backend(config.teacher)
    student = create_backend(config.student)
    kind = config.trainer.get("kind", "toy")
    if kind == "toy":
        if not isinstance(student, ToyStudentBackend):
            raise ValueError("toy trainer requires a toy student backend")
        trainer = ToyTrainer(student)
        initial = CheckpointHandle(id="init")
    elif kind == "http":
        endpoint = config.trainer.get("endpoint", "")
        if not endpoint:
            raise ValueError("http trainer needs an 'endpoint'")
        trainer = HttpTrainer(
            endpoint,
            poll_interval=config.trainer.get("poll_interval", 0.25),
            deadline=config.trainer.get("deadline", 600.0),
        )
        initial = CheckpointHandle(id=config.student.model_name or "init")
    elif kind == "subprocess":
        command = config.trainer.get("command")
        if not command:
            raise ValueError("subprocess trainer needs a 'command'")
        trainer = SubprocessTrainer(command, timeout=config.trainer.get("timeout", 600.0))
        initial = CheckpointHandle(id=config.student.model_name or "init")
    else:
        raise ValueError(f"unknown trainer kind {kind!r}")
    return Runtime(teacher=teacher, student=student, trainer=trainer, initial_checkpoint=initial)


# ---------------------------------------------------------------------------
# run state


@dataclass
class RoundSummary:
    k: int
    checkpoint_id: str
    dataset_digest: str
    retained: int
    discarded: int
    val_accuracy: float
    val_correct: int
    val_n: int
    test_metrics: dict[str, dict]

    def to_json_obj(self) -> dict:
        return {
            "k": self.k,
            "checkpoint_id": self.checkpoint_id,
            "dataset_digest": self.dataset_digest,
            "retained": self.retained,
            "discarded": self.discarded,
            "val_accuracy": self.val_accuracy,
            "val_correct": self.val_correct,
            "val_n": self.val_n,
            "test_metrics": self.test_metrics,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RoundSummary":
        return cls(
            k=obj["k"],
            checkpoint_id=obj["checkpoint_id"],
            dataset_digest=obj["dataset_digest"],
            retained=obj["retained"],
            discarded=obj["discarded"],
            val_accuracy=obj["val_accuracy"],
            val_correct=obj["val_correct"],
            val_n=obj["val_n"],
            test_metrics=obj["test_metrics"],
        )


@dataclass
class RunResult:
    run_dir: str
    rounds: list[RoundSummary]
    best_k: int
    stopped_reason: str
    resumed: bool = False

    @property
    def accuracies(self) -> list[float]:
        return [r.val_accuracy for r in self.rounds]

    @property
    def final_round(self) -> RoundSummary:
        return self.rounds[-1]


class DistillationRun:
    """One run directory plus the machinery to advance it round by round."""

    def __init__(self, config: RunConfig, runtime: Runtime | None = None):
        if not config.run_dir:
            raise ValueError("config.run_dir is required")
        self.config = config
        self.runtime = runtime or build_runtime(config)
        self.run_dir = Path(config.run_dir)
        self.template_dir = config.template_dir or None
        self.provenance: dict[str, str] = {}
        self.split: CorpusSplit | None = None
        self.rounds: list[RoundSummary] = []
        self.status = "running"
        self.best_k: int | None = None
        self.stopped_reason: str | None = None

    # -- paths ------------------------------------------------------------

    def round_dir(self, k: int) -> Path:
        return self.run_dir / f"iter_{k}"

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    # -- manifest ---------------------------------------------------------

    def _template_digests(self) -> dict[str, str]:
        names = [
            "teacher_iter1.tmpl",
            "teacher_iterk.tmpl",
            "exemplar_block.tmpl",
            "iteration_block.tmpl",
            "student_train.tmpl",
            "student_eval.tmpl",
        ]
        digests = {}
        for name in names:
            text = load_template(name, self.template_dir)
            digests[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return digests

    def _corpus_digest(self) -> str:
        return hashlib.sha256(Path(self.config.corpus_path).read_bytes()).hexdigest()

    def manifest_obj(self) -> dict:
        return {
            "config": self.config.to_json_obj(),
            "config_provenance": self.provenance,
            "corpus_digest": self._corpus_digest(),
            "template_digests": self._template_digests(),
            "validation_ids": [p.id for p in self.split.validation],
            "rounds": [r.to_json_obj() for r in self.rounds],
            "status": self.status,
            "best_k": self.best_k,
            "stopped_reason": self.stopped_reason,
        }

    def write_manifest(self) -> None:
        write_json_atomic(self.manifest_path, self.manifest_obj())

    # -- setup ------------------------------------------------------------

    def prepare(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        corpus = load_corpus(self.config.corpus_path)
        self.split = split_validation(corpus, self.config.m, self.config.seed)
        marker = self.run_dir / FAILED_MARKER
        if marker.exists():
            marker.unlink()

    def _fail(self, exc: Exception) -> None:
        try:
            write_text_atomic(
                self.run_dir / FAILED_MARKER,
                f"{type(exc).__name__}: {exc}\n",
            )
        except OSError:
            pass

    # -- generation helpers ------------------------------------------------

    def _generate(self, prompts: list[str], params: GenerationParams, backend=None,
                  checkpoint_id: str | None = None) -> list[str]:
        target = backend if backend is not None else self.runtime.teacher
        if checkpoint_id is not None:
            bound = _CheckpointBound(target, checkpoint_id)
            results = batch_generate(bound, prompts, params, parallelism=self.config.parallelism)
        else:
            results = batch_generate(target, prompts, params, parallelism=self.config.parallelism)
        errors = [r.error for r in results if not r.ok]
        if errors:
            raise BackendError(
                f"{len(errors)} of {len(prompts)} generations failed; first: {errors[0]}"
            )
        return [r.text for r in results]

    def _student_generate(self, prompts: list[str], checkpoint_id: str) -> list[str]:
        return self._generate(
            prompts,
            self.config.student_eval_sampling,
            backend=self.runtime.student,
            checkpoint_id=checkpoint_id,
        )

    # -- history ----------------------------------------------------------

    def _load_val_history(self, upto_k: int) -> list[ValidationExample]:
        """History for validation questions covering rounds 1..upto_k."""
        examples = []
        per_round: list[tuple[dict[str, str], dict[str, GradedGeneration]]] = []
        for j in range(1, upto_k + 1):
            teacher = {
                row["problem_id"]: row["teacher_answer"]
                for row in read_jsonl(self.round_dir(j) / VAL_TEACHER)
            }
            scores = {g.problem_id: g for g in read_graded(self.round_dir(j) / VAL_SCORES)}
            per_round.append((teacher, scores))
        for problem in self.split.validation:
            history = []
            for j, (teacher, scores) in enumerate(per_round, start=1):
                graded = scores[problem.id]
                history.append(
                    ValidationHistoryEntry(
                        iteration=j,
                        teacher_answer=teacher[problem.id],
                        student_answer=graded.generation,
                        score=graded.score,
                    )
                )
            examples.append(ValidationExample(question=problem.question, history=history))
        return examples

    def _load_prev_student(self, k: int) -> dict[str, str]:
        return {
            row["problem_id"]: row["generation"]
            for row in read_jsonl(self.round_dir(k) / STUDENT_TRAIN_GENS)
        }

    def _load_prev_teacher(self, upto_k: int) -> dict[str, str]:
        """Most recent retained teacher rationale per training question.

        A question dropped by the filter in round ``j`` keeps its last
        retained rationale from an earlier round in later prompts.
        """
        merged: dict[str, str] = {}
        for j in range(1, upto_k + 1):
            for question, rationale, _ in read_training_file(self.round_dir(j) / TEACHER_DATA):
                merged[question] = rationale
        return merged

    # -- prompt assembly ---------------------------------------------------

    def _fit_budget(self, examples: list[ValidationExample], build) -> str:
        """Render a prompt, pruning whole oldest-iteration blocks when
        configured, until it fits the context budget."""
        current = examples
        while True:
            prompt = build(current)
            result = check_budget(
                prompt, self.config.context_budget, self.config.chars_per_token
            )
            if result.ok:
                return prompt
            if not self.config.prune_oldest:
                raise _BudgetSignal(result.estimated)
            try:
                current = drop_oldest_round(current)
            except ValueError:
                raise _BudgetSignal(result.estimated)

    def _regeneration_prompts(self, k: int) -> tuple[list[str], list[str]]:
        """Teacher prompts for round ``k + 1``: one per training question,
        one per validation question."""
        history = self._load_val_history(k)
        prev_student = self._load_prev_student(k)
        prev_teacher = self._load_prev_teacher(k)
        val_by_id = {p.id: i for i, p in enumerate(self.split.validation)}

        def prompt_for(problem: Problem) -> str:
            # every prompt shows the full scored validation history; a
            # validation target's own entry stays in, its latest attempt is
            # also the target context
            if problem.id in val_by_id:
                entry = history[val_by_id[problem.id]].history[-1]
                target_student = entry.student_answer
                target_teacher = entry.teacher_answer
            else:
                target_student = prev_student.get(problem.id, "")
                target_teacher = prev_teacher.get(problem.question)

            if k == 1:
                def build(examples):
                    return build_initial_teacher_prompt(
                        problem.question,
                        instruction=self.config.instruction,
                        exemplars=[
                            (ex.question, ex.history[0].teacher_answer,
                             ex.history[0].student_answer, ex.history[0].score)
                            for ex in examples
                        ],
                        template_dir=self.template_dir,
                    )
            else:
                def build(examples):
                    return build_gap_prompt(
                        GapContext(
                            question=problem.question,
                            prev_student=target_student,
                            prev_teacher=target_teacher,
                            validation_examples=examples,
                        ),
                        instruction=self.config.instruction,
                        template_dir=self.template_dir,
                    )

            try:
                return self._fit_budget(history, build)
            except _BudgetSignal as sig:
                raise ContextBudgetExceededError(
                    problem.id, sig.estimated, self.config.context_budget
                ) from None

        train_prompts = [prompt_for(p) for p in self.split.train]
        val_prompts = [prompt_for(p) for p in self.split.validation]
        return train_prompts, val_prompts

    # -- round phases ------------------------------------------------------

    def _write_teacher_round(self, k: int, train_rationales: list[str],
                             val_rationales: list[str]) -> tuple[int, int]:
        """Filter and persist one round of teacher data.  Validation
        rationales are kept unfiltered (they feed history, not training)."""
        rdir = self.round_dir(k)
        rdir.mkdir(parents=True, exist_ok=True)
        write_jsonl_atomic(
            rdir / VAL_TEACHER,
            [
                {"problem_id": p.id, "teacher_answer": text}
                for p, text in zip(self.split.validation, val_rationales)
            ],
        )
        records, discarded = filter_teacher_records(
            self.split.train, train_rationales, self.config.instruction
        )
        if not records:
            raise EmptyDatasetError(
                f"round {k}: every teacher rationale failed the answer filter"
            )
        tmp = rdir / (TEACHER_DATA + ".tmp")
        write_training_file(records, tmp)
        os.replace(tmp, rdir / TEACHER_DATA)
        return len(records), discarded

    def _train_round(self, k: int, base: CheckpointHandle) -> CheckpointHandle:
        rdir = self.round_dir(k)
        job = FineTuneJob(
            base=base,
            dataset_path=str(rdir / TEACHER_DATA),
            epochs=epochs_for_round(self.config, k),
            instruction=self.config.instruction,
            hyper=dict(self.config.trainer.get("hyper", {})),
        )
        checkpoint = fine_tune(self.runtime.trainer, job)
        payload = {"checkpoint": checkpoint.to_json_obj()}
        if isinstance(self.runtime.student, ToyStudentBackend):
            payload["toy_state"] = self.runtime.student.registry[checkpoint.id].to_json_obj()
        write_json_atomic(rdir / CHECKPOINT, payload)
        return checkpoint

    def _eval_validation(self, k: int, checkpoint: CheckpointHandle) -> tuple[float, int]:
        prompts = [
            build_student_prompt(p.question, self.config.instruction,
                                 template_dir=self.template_dir)
            for p in self.split.validation
        ]
        texts = self._student_generate(prompts, checkpoint.id)
        graded = grade_batch(
            [(p.id, t) for p, t in zip(self.split.validation, texts)],
            self.split.validation,
        )
        write_graded(graded, self.round_dir(k) / VAL_SCORES)
        metrics = accuracy(graded, suite="validation")
        return metrics.accuracy, metrics.correct

    def _student_train_gens(self, k: int, checkpoint: CheckpointHandle) -> None:
        prompts = [
            build_student_prompt(p.question, self.config.instruction,
                                 template_dir=self.template_dir)
            for p in self.split.train
        ]
        texts = self._student_generate(prompts, checkpoint.id)
        write_jsonl_atomic(
            self.round_dir(k) / STUDENT_TRAIN_GENS,
            [
                {"problem_id": p.id, "generation": t}
                for p, t in zip(self.split.train, texts)
            ],
        )

    def _load_few_shot(self, spec: SuiteSpec) -> list[tuple[str, str]]:
        if not spec.few_shot_path:
            return []
        shots = []
        for row in read_jsonl(Path(spec.few_shot_path)):
            shots.append((row["question"], row["rationale"]))
        return shots

    def _eval_test_suites(self, k: int, checkpoint: CheckpointHandle) -> dict[str, dict]:
        metrics: dict[str, dict] = {}
        rdir = self.round_dir(k)
        for spec in self.config.test_suites:
            suite = load_test_suite(spec.path, spec.name)
            suite_metrics, graded = evaluate_suite(
                self.runtime.student,
                suite,
                self.config.student_eval_sampling,
                self.config.instruction,
                few_shot=self._load_few_shot(spec),
                parallelism=self.config.parallelism,
                checkpoint_id=checkpoint.id,
                template_dir=self.template_dir,
            )
            write_graded(graded, rdir / f"test_{spec.name}.jsonl")
            metrics[spec.name] = suite_metrics.to_json_obj()
        write_json_atomic(rdir / TEST_METRICS, metrics)
        return metrics

    def _finish_round(self, k: int, checkpoint: CheckpointHandle, retained: int,
                      discarded: int, val_accuracy: float, val_correct: int,
                      test_metrics: dict, started: float) -> RoundSummary:
        rdir = self.round_dir(k)
        digest = dataset_digest(rdir / TEACHER_DATA)
        write_json_atomic(
            rdir / ROUND_RECORD,
            {
                "k": k,
                "epochs": epochs_for_round(self.config, k),
                "started_at": started,
                "finished_at": time.time(),
                "wall_seconds": time.time() - started,
            },
        )
        summary = RoundSummary(
            k=k,
            checkpoint_id=checkpoint.id,
            dataset_digest=digest,
            retained=retained,
            discarded=discarded,
            val_accuracy=val_accuracy,
            val_correct=val_correct,
            val_n=len(self.split.validation),
            test_metrics=test_metrics,
        )
        self.rounds.append(summary)
        self.write_manifest()
        return summary

    # -- rounds ------------------------------------------------------------

    def _teacher_phase(self, k: int) -> tuple[int, int]:
        """Produce round ``k``'s teacher data unless already on disk."""
        rdir = self.round_dir(k)
        if (rdir / TEACHER_DATA).exists() and (rdir / VAL_TEACHER).exists():
            records = read_training_file(rdir / TEACHER_DATA)
            return len(records), len(self.split.train) - len(records)
        if k == 1:
            prompts = [
                build_student_prompt(p.question, self.config.instruction,
                                     template_dir=self.template_dir)
                for p in self.split.train
            ]
            val_prompts = [
                build_student_prompt(p.question, self.config.instruction,
                                     template_dir=self.template_dir)
                for p in self.split.validation
            ]
        else:
            prompts, val_prompts = self._regeneration_prompts(k - 1)
        train_rationales = self._generate(prompts, self.config.teacher_sampling)
        val_rationales = self._generate(val_prompts, self.config.teacher_sampling)
        return self._write_teacher_round(k, train_rationales, val_rationales)

    def _run_round(self, k: int, base: CheckpointHandle) -> tuple[RoundSummary, CheckpointHandle]:
        started = time.time()
        retained, discarded = self._teacher_phase(k)
        rdir = self.round_dir(k)

        checkpoint = self._load_checkpoint(k)
        if checkpoint is None:
            checkpoint = self._train_round(k, base)

        if (rdir / VAL_SCORES).exists():
            graded = read_graded(rdir / VAL_SCORES)
            metrics = accuracy(graded, suite="validation")
            val_accuracy, val_correct = metrics.accuracy, metrics.correct
        else:
            val_accuracy, val_correct = self._eval_validation(k, checkpoint)

        if not (rdir / STUDENT_TRAIN_GENS).exists():
            self._student_train_gens(k, checkpoint)

        if (rdir / TEST_METRICS).exists():
            test_metrics = json.loads((rdir / TEST_METRICS).read_text(encoding="utf-8"))
        else:
            test_metrics = self._eval_test_suites(k, checkpoint)

        summary = self._finish_round(
            k, checkpoint, retained, discarded, val_accuracy, val_correct,
            test_metrics, started,
        )
        return summary, checkpoint

    def _load_checkpoint(self, k: int) -> CheckpointHandle | None:
        path = self.round_dir(k) / CHECKPOINT
        if not path.exists():
            return None
        payload = json.loads(path.read_text(encoding="utf-8"))
        checkpoint = CheckpointHandle.from_json_obj(payload["checkpoint"])
        if isinstance(self.runtime.student, ToyStudentBackend) and "toy_state" in payload:
            from .backends import ToyStudentModel

            self.runtime.student.registry.setdefault(
                checkpoint.id, ToyStudentModel.from_json_obj(payload["toy_state"])
            )
        return checkpoint

    # -- reporting ---------------------------------------------------------

    def _write_final_outputs(self) -> None:
        suites = ["validation"] + [s.name for s in self.config.test_suites]
        per_iteration = []
        for summary in self.rounds:
            row = {
                "validation": SuiteMetrics.from_counts(
                    "validation", summary.val_n, summary.val_correct
                )
            }
            for name in suites[1:]:
                m = summary.test_metrics.get(name)
                if m is None:
                    continue
                row[name] = SuiteMetrics(
                    suite=name, n=m["n"], correct=m.get("correct"), accuracy=m["accuracy"]
                )
            per_iteration.append(row)
        report = build_report(per_iteration, model=self.run_dir.name)
        write_text_atomic(self.run_dir / REPORT_NAME, render_table(report, "text"))
        tmp = self.run_dir / (PLOT_SERIES_NAME + ".tmp")
        emit_plot_series([report], tmp)
        os.replace(tmp, self.run_dir / PLOT_SERIES_NAME)

    # -- drivers -----------------------------------------------------------

    def execute(self, after_round=None) -> RunResult:
        """Advance the run to completion, starting from whatever rounds are
        already recorded in ``self.rounds``."""
        try:
            base = self.runtime.initial_checkpoint
            if self.rounds:
                last = self._load_checkpoint(len(self.rounds))
                if last is None:
                    raise RuntimeError(
                        f"manifest lists round {len(self.rounds)} but its checkpoint is missing"
                    )
                base = last
                # earlier checkpoints may be needed for nothing, but load
                # them anyway so the registry matches an uninterrupted run
                for j in range(1, len(self.rounds)):
                    self._load_checkpoint(j)
            while True:
                if self.rounds:
                    decision = check_convergence(
                        [r.val_accuracy for r in self.rounds],
                        patience=self.config.patience,
                        K_max=self.config.K_max,
                    )
                    if decision.stop:
                        self.best_k = decision.best_k
                        self.stopped_reason = decision.reason
                        self.status = "complete"
                        self.write_manifest()
                        break
                k = len(self.rounds) + 1
                _, checkpoint = self._run_round(k, base)
                base = checkpoint
                if after_round is not None:
                    after_round(k, self)
            self._write_final_outputs()
        except Exception as exc:
            self._fail(exc)
            raise
        return RunResult(
            run_dir=str(self.run_dir),
            rounds=list(self.rounds),
            best_k=self.best_k,
            stopped_reason=self.stopped_reason,
        )


class _BudgetSignal(Exception):
    def __init__(self, estimated: int):
        self.estimated = estimated


class _CheckpointBound:
    def __init__(self, backend, checkpoint_id: str):
        self.backend = backend
        self.checkpoint_id = checkpoint_id

    def generate(self, prompt, params=None):
        return self.backend.generate(prompt, params, checkpoint_id=self.checkpoint_id)


# ---------------------------------------------------------------------------
# public entry points


def run_distillation(
    config: RunConfig,
    runtime: Runtime | None = None,
    provenance: dict[str, str] | None = None,
    after_round=None,
) -> RunResult:
    """Run the full loop from scratch in ``config.run_dir``."""
    run = DistillationRun(config, runtime)
    run.provenance = provenance or {}
    run.prepare()
    return run.execute(after_round=after_round)


def run_standard_distillation(
    config: RunConfig,
    runtime: Runtime | None = None,
    provenance: dict[str, str] | None = None,
) -> RunResult:
    """Plain one-round distillation: cold teacher rationales, answer filter,
    a single fine-tune, recorded as iteration 1."""
    import dataclasses

    single = dataclasses.replace(config, K_max=1)
    return run_distillation(single, runtime, provenance)


def resume(run_dir: str, runtime: Runtime | None = None, after_round=None) -> RunResult:
    """Pick a run back up from its manifest.

    Completed rounds are trusted as recorded; a partially written round is
    re-entered and continues at its first missing artifact (atomic writes
    guarantee present files are whole).  Resuming an already complete run
    just re-renders the report and plot series, which must come out
    byte-identical.
    """
    run_path = Path(run_dir)
    manifest_path = run_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config, _ = parse_run_config(manifest["config"], run_dir=str(run_path))
    run = DistillationRun(config, runtime)
    run.provenance = manifest.get("config_provenance", {})
    run.prepare()
    if manifest["validation_ids"] != [p.id for p in run.split.validation]:
        raise RuntimeError(
            "resume: corpus or seed changed; validation split no longer matches manifest"
        )
    run.rounds = [RoundSummary.from_json_obj(o) for o in manifest["rounds"]]
    if manifest["status"] == "complete":
        run.status = "complete"
        run.best_k = manifest["best_k"]
        run.stopped_reason = manifest["stopped_reason"]
        for j in range(1, len(run.rounds) + 1):
            run._load_checkpoint(j)
        run._write_final_outputs()
        return RunResult(
            run_dir=str(run_path),
            rounds=run.rounds,
            best_k=run.best_k,
            stopped_reason=run.stopped_reason,
            resumed=True,
        )
    result = run.execute(after_round=after_round)
    result.resumed = True
    return result


def export_final_dataset(run_dir: str, out_path: str | None = None) -> str:
    """Copy the best round's filtered teacher data out of a completed run,
    ready to train a fresh student elsewhere."""
    run_path = Path(run_dir)
    manifest = json.loads((run_path / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest["status"] != "complete":
        raise RuntimeError(f"run {run_dir} is not complete")
    best_k = manifest["best_k"]
    source = run_path / f"iter_{best_k}" / TEACHER_DATA
    destination = Path(out_path) if out_path else run_path / FINAL_DATASET_NAME
    destination.parent.mkdir(parents=True, exist_ok=True)
    tmp = destination.with_name(destination.name + ".tmp")
    shutil.copyfile(source, tmp)
    os.replace(tmp, destination)
    return str(destination)


def run_from_dataset(
    config: RunConfig,
    dataset_path: str,
    runtime: Runtime | None = None,
) -> RunResult:
    """Train a student once on an existing exported dataset (no teacher),
    then evaluate it; used to reuse one run's final data on another student."""
    run = DistillationRun(config, runtime)
    run.prepare()
    try:
        k = 1
        started = time.time()
        rdir = run.round_dir(k)
        rdir.mkdir(parents=True, exist_ok=True)
        records = read_training_file(dataset_path)
        if not (rdir / TEACHER_DATA).exists():
            tmp = rdir / (TEACHER_DATA + ".tmp")
            write_training_file(records, tmp)
            os.replace(tmp, rdir / TEACHER_DATA)
        write_jsonl_atomic(rdir / VAL_TEACHER, [])
        checkpoint = run._load_checkpoint(k)
        if checkpoint is None:
            checkpoint = run._train_round(k, run.runtime.initial_checkpoint)
        val_accuracy, val_correct = run._eval_validation(k, checkpoint)
        run._student_train_gens(k, checkpoint)
        test_metrics = run._eval_test_suites(k, checkpoint)
        run._finish_round(
            k, checkpoint, len(records), 0, val_accuracy, val_correct,
            test_metrics, started,
        )
        run.best_k = 1
        run.stopped_reason = STOP_K_MAX
        run.status = "complete"
        run.write_manifest()
        run._write_final_outputs()
    except Exception as exc:
        run._fail(exc)
        raise
    return RunResult(
        run_dir=str(run.run_dir),
        rounds=list(run.rounds),
        best_k=1,
        stopped_reason=STOP_K_MAX,
    )
