"""Iterative distillation with error-conditioned teacher regeneration.

The package is organized around the loop in :mod:`gapdistill.loop`:
corpora (:mod:`gapdistill.corpus`) feed prompt assembly
(:mod:`gapdistill.prompts`), generations come from pluggable backends
(:mod:`gapdistill.backends`), rationales and final answers are scored by
:mod:`gapdistill.grade`, results are folded into tables by
:mod:`gapdistill.evaluation`, and :mod:`gapdistill.sim` provides a small
exact-divergence model of the whole process for analysis.
"""

from .backends import (
    BackendError,
    BackendHandle,
    CheckpointHandle,
    ContextOverflowError,
    FineTuneJob,
    GenerationParams,
    ScriptedTeacher,
    ServerError,
    ToyStudentBackend,
    ToyTrainer,
    TrainerError,
    TransportError,
    create_backend,
    fine_tune,
)
from .corpus import (
    CorpusFormatError,
    CorpusSplit,
    Problem,
    TestSuite,
    load_corpus,
    load_test_suite,
    preprocess,
    serialize_corpus,
    split_validation,
)
from .evaluation import IterationReport, build_report, evaluate_suite, render_table
from .grade import (
    GradedGeneration,
    SuiteMetrics,
    accuracy,
    extract_final_answer,
    grade_batch,
    normalize_answer,
    score,
    significance,
    weighted_average,
)
from .loop import (
    ContextBudgetExceededError,
    ConvergenceDecision,
    RunConfig,
    RunResult,
    check_convergence,
    export_final_dataset,
    parse_run_config,
    resume,
    run_distillation,
    run_standard_distillation,
)
from .prompts import (
    GapContext,
    ValidationExample,
    ValidationHistoryEntry,
    build_gap_prompt,
    build_initial_teacher_prompt,
    build_student_prompt,
    check_budget,
    estimate_tokens,
)
from .sim import (
    Categorical,
    InfiniteDivergenceError,
    ToyScenario,
    exact_kl,
    geometric_update,
    load_scenario,
    simulate,
    simulate_standard,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BackendHandle",
    "Categorical",
    "CheckpointHandle",
    "ContextBudgetExceededError",
    "ContextOverflowError",
    "ConvergenceDecision",
    "CorpusFormatError",
    "CorpusSplit",
    "FineTuneJob",
    "GapContext",
    "GenerationParams",
    "GradedGeneration",
    "InfiniteDivergenceError",
    "IterationReport",
    "Problem",
    "RunConfig",
    "RunResult",
    "ScriptedTeacher",
    "ServerError",
    "SuiteMetrics",
    "TestSuite",
    "ToyScenario",
    "ToyStudentBackend",
    "ToyTrainer",
    "TrainerError",
    "TransportError",
    "ValidationExample",
    "ValidationHistoryEntry",
    "accuracy",
    "build_gap_prompt",
    "build_initial_teacher_prompt",
    "build_report",
    "build_student_prompt",
    "check_budget",
    "check_convergence",
    "create_backend",
    "estimate_tokens",
    "evaluate_suite",
    "exact_kl",
    "export_final_dataset",
    "extract_final_answer",
    "fine_tune",
    "geometric_update",
    "grade_batch",
    "load_corpus",
    "load_scenario",
    "load_test_suite",
    "normalize_answer",
    "parse_run_config",
    "preprocess",
    "render_table",
    "resume",
    "run_distillation",
    "run_standard_distillation",
    "score",
    "serialize_corpus",
    "significance",
    "simulate",
    "simulate_standard",
    "split_validation",
    "weighted_average",
    "__version__",
]
