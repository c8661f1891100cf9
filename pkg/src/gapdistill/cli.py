"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors (bad flags, malformed
``--set``), 2 on runtime failures (missing files, invalid config, backend
errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import loop, sim
from .backends import BackendError, batch_generate, create_backend
from .corpus import (
    CorpusFormatError,
    PreprocessRules,
    load_corpus,
    load_test_suite,
    preprocess,
    serialize_corpus,
    split_validation,
)
from .evaluation import build_report, evaluate_suite, render_table
from .grade import SuiteMetrics, accuracy, grade_batch, write_graded
from .loop import RunConfig, parse_run_config


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; we reserve 2 for
    runtime failures, so redirect usage problems through an exception."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="gapdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", parents=[], help="filter a raw corpus into training form")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--question-type", default="math-word-problem",
                   help="required question_type metadata value ('' disables the filter)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="carve a validation split out of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("-m", type=int, default=20, help="validation size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("generate", help="run one backend over a prompt file")
    p.add_argument("--config", required=True, help="run config supplying the backends")
    p.add_argument("--role", choices=["teacher", "student"], default="teacher")
    p.add_argument("--prompts", required=True, help="JSONL of {id, prompt}")
    p.add_argument("--output", required=True, help="JSONL of {id, text}")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("grade", help="score generations against gold answers")
    p.add_argument("--generations", required=True, help="JSONL of {problem_id, generation}")
    p.add_argument("--problems", required=True, help="corpus JSONL with gold answers")
    p.add_argument("--answer-kind", default=None)
    p.add_argument("--output", default=None, help="write graded JSONL here")
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("distill", help="run the full iterative loop")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (dotted paths, JSON values)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one test suite")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--path", required=True, help="suite problems JSONL")
    p.add_argument("--few-shot", default="", help="JSONL of {question, rationale}")
    p.add_argument("--output", default=None, help="write graded JSONL here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render the accuracy table for a run")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--metrics", default=None,
                   help="fixture JSON with externally measured accuracies")
    p.add_argument("--format", choices=["text", "markdown", "csv"], default="text")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-data", help="export the best round's teacher data")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_export_data)

    p = sub.add_parser("sim", help="run the exact-divergence simulator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--fit-strength", type=float, default=None,
                   help="override the scenario's update strength")
    p.add_argument("--mode", choices=["gap", "standard"], default="gap")
    p.add_argument("--output", default=None, help="trajectory CSV path")
    p.set_defaults(func=cmd_sim)

    return parser


# ---------------------------------------------------------------------------
# config loading


def apply_override(obj: dict, setting: str) -> str:
    """Apply one ``--set path=value`` to a config dict; values parse as JSON
    when possible and fall back to plain strings.  Returns the top-level key
    that was touched."""
    if "=" not in setting:
        raise _UsageError(f"--set needs KEY=VALUE, got {setting!r}")
    path, raw = setting.split("=", 1)
    keys = path.split(".")
    if not all(keys):
        raise _UsageError(f"--set has an empty path segment: {setting!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    target = obj
    for key in keys[:-1]:
        node = target.setdefault(key, {})
        if not isinstance(node, dict):
            raise _UsageError(f"--set cannot descend into non-object at {key!r}")
        target = node
    target[keys[-1]] = value
    return keys[0]


def load_config(path: str, sets: list[str] = ()) -> tuple[RunConfig, dict[str, str]]:
    """Read a run config file, apply ``--set`` overrides, and validate.

    Provenance marks each field ``default``, ``user`` (from the file), or
    ``override`` (changed on the command line).
    """
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    overridden = {apply_override(obj, s) for s in sets}
    config, provenance = parse_run_config(obj)
    for key in overridden:
        provenance[key] = "override"
    return config, provenance


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.input)
    rules = PreprocessRules(require_question_type=args.question_type or None)
    result = preprocess(corpus, rules)
    serialize_corpus(result.retained, args.output)
    total_dropped = sum(result.dropped.values())
    print(f"retained {len(result.retained)} problems, dropped {total_dropped}")
    for reason in sorted(result.dropped):
        print(f"  {reason}: {result.dropped[reason]}")
    return 0


def cmd_split(args) -> int:
    corpus = load_corpus(args.corpus)
    split = split_validation(corpus, args.m, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serialize_corpus(split.train, out / "train.jsonl")
    serialize_corpus(split.validation, out / "validation.jsonl")
    print(f"train {len(split.train)}, validation {len(split.validation)} (seed {args.seed})")
    return 0


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def cmd_generate(args) -> int:
    config, _ = load_config(args.config)
    if args.role == "teacher":
        handle, params = config.teacher, config.teacher_sampling
    else:
        handle, params = config.student, config.student_eval_sampling
    if handle is None:
        raise ValueError(f"config does not define a {args.role} backend")
    backend = create_backend(handle)
    rows = _read_jsonl(args.prompts)
    prompts = [row["prompt"] for row in rows]
    results = batch_generate(backend, prompts, params, parallelism=config.parallelism)
    with open(args.output, "w", encoding="utf-8") as fh:
        for row, result in zip(rows, results):
            record = {"id": row.get("id", ""), "text": result.text}
            if result.error:
                record["error"] = result.error
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    failures = sum(1 for r in results if not r.ok)
    print(f"generated {len(results) - failures}/{len(results)} prompts")
    return 0 if failures == 0 else 2


def cmd_grade(args) -> int:
    problems = load_corpus(args.problems)
    rows = _read_jsonl(args.generations)
    pairs = [
        (row.get("problem_id") or row.get("id"), row.get("generation") or row.get("text", ""))
        for row in rows
    ]
    graded = grade_batch(pairs, problems, answer_kind=args.answer_kind)
    if args.output:
        write_graded(graded, args.output)
    metrics = accuracy(graded)
    print(f"accuracy {metrics.accuracy:.4f} ({metrics.correct}/{metrics.n})")
    return 0


def _print_result(result: loop.RunResult) -> None:
    for summary in result.rounds:
        print(
            f"iteration {summary.k}: val {summary.val_accuracy:.4f} "
            f"({summary.val_correct}/{summary.val_n}), "
            f"dataset {summary.retained} kept / {summary.discarded} dropped"
        )
    print(f"stopped: {result.stopped_reason}, best iteration {result.best_k}")


def cmd_distill(args) -> int:
    config, provenance = load_config(args.config, args.set)
    result = loop.run_distillation(config, provenance=provenance)
    _print_result(result)
    print(f"run directory: {result.run_dir}")
    return 0


def cmd_resume(args) -> int:
    result = loop.resume(args.run_dir)
    _print_result(result)
    return 0


def cmd_eval(args) -> int:
    config, _ = load_config(args.config)
    if config.student is None:
        raise ValueError("config does not define a student backend")
    backend = create_backend(config.student)
    suite = load_test_suite(args.path, args.suite)
    few_shot = []
    if args.few_shot:
        few_shot = [(r["question"], r["rationale"]) for r in _read_jsonl(args.few_shot)]
    metrics, graded = evaluate_suite(
        backend,
        suite,
        config.student_eval_sampling,
        config.instruction,
        few_shot=few_shot,
        parallelism=config.parallelism,
        checkpoint_id=args.checkpoint,
        template_dir=config.template_dir or None,
    )
    if args.output:
        write_graded(graded, args.output)
    print(f"{suite.name}: accuracy {metrics.accuracy:.4f} ({metrics.correct}/{metrics.n})")
    return 0


def _report_from_run(run_dir: str):
    manifest_path = Path(run_dir) / loop.MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    per_iteration = []
    for entry in manifest["rounds"]:
        row = {
            "validation": SuiteMetrics.from_counts(
                "validation", entry["val_n"], entry["val_correct"]
            )
        }
        for name, m in entry["test_metrics"].items():
            row[name] = SuiteMetrics(
                suite=name, n=m["n"], correct=m.get("correct"), accuracy=m["accuracy"]
            )
        per_iteration.append(row)
    return build_report(per_iteration, model=Path(run_dir).name)


def _report_from_fixture(path: str):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    per_iteration = []
    for row in obj["iterations"]:
        per_iteration.append(
            {
                suite: SuiteMetrics(
                    suite=suite, n=m["n"], correct=m.get("correct"), accuracy=m["accuracy"]
                )
                for suite, m in row.items()
            }
        )
    return build_report(
        per_iteration,
        model=obj.get("model", ""),
        baseline_iteration=obj.get("baseline_iteration", 1),
        percent=obj.get("percent", False),
    )


def cmd_report(args) -> int:
    if bool(args.run_dir) == bool(args.metrics):
        raise _UsageError("report needs exactly one of --run-dir or --metrics")
    report = _report_from_run(args.run_dir) if args.run_dir else _report_from_fixture(args.metrics)
    rendered = render_table(report, args.format)
    if args.output:
        Path(args.output).write_text(rendered, encoding="utf-8")
    else:
        print(rendered, end="")
    return 0


def cmd_export_data(args) -> int:
    path = loop.export_final_dataset(args.run_dir, args.output)
    print(path)
    return 0


def cmd_sim(args) -> int:
    scenario = sim.load_scenario(args.scenario)
    if args.fit_strength is not None:
        scenario = sim.ToyScenario(
            fit_strength=args.fit_strength, questions=scenario.questions
        )
    if args.mode == "gap":
        rows = sim.simulate(scenario, rounds=args.rounds)
    else:
        rows = sim.simulate_standard(scenario, rounds=args.rounds)
    if args.output:
        sim.write_trajectory_csv(rows, args.output)
    last_iter = max(r.iteration for r in rows)
    for row in rows:
        if row.iteration == last_iter:
            print(f"round {row.iteration} {row.question}: divergence {row.kl:.6g}")
    final_acc = next(r.accuracy for r in rows if r.iteration == last_iter)
    print(f"final accuracy {final_acc:.6g}")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version exit through argparse
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        OSError,
        ValueError,
        KeyError,
        RuntimeError,
        CorpusFormatError,
        BackendError,
        json.JSONDecodeError,
        sim.InfiniteDivergenceError,
    ) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
