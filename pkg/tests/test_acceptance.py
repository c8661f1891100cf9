"""Release acceptance checks.

Each test here is one gate criterion and shows up as a single pass/fail
line under ``pytest -v``.  The checks lean on committed fixtures:
``reference_results.json`` (transcribed external accuracy tables),
``normalization_cases.json`` (scoring fixture, cross-checked against the
independent re-implementation in ``normalization_oracle.py``), the worked
example and golden prompt renders, and the staged scripted-teacher corpus
from ``conftest``.

Criterion 1 is expected to surface any internal inconsistency in the
transcribed tables: the printed size-weighted averages are recomputed from
the per-suite cells at the stated tolerance, and cells that cannot be
reproduced are reported rather than patched over.

The wire contract for the external fine-tuning service has its own gate in
the companion ``trainer-adapter`` package's test suite.
"""

import json
import math
import random
import time
from pathlib import Path

import pytest

import normalization_oracle as oracle
from gapdistill.corpus import load_corpus, split_validation
from gapdistill.grade import extract_final_answer, read_graded, score, weighted_average
from gapdistill.loop import (
    MANIFEST_NAME,
    ContextBudgetExceededError,
    check_convergence,
    read_jsonl,
    resume,
    run_distillation,
    run_standard_distillation,
)
from gapdistill.prompts import (
    GapContext,
    ValidationExample,
    ValidationHistoryEntry,
    build_gap_prompt,
    build_initial_teacher_prompt,
    estimate_tokens,
    iteration_indices,
)
from gapdistill.sim import Categorical, exact_kl, kl_nll_identity_check
from gapdistill.backends import read_training_file

from conftest import (
    DATA_DIR,
    build_staged_scenario,
    correct_rationale,
    simple_corpus,
    toy_config,
    wrong_rationale,
)

with open(DATA_DIR / "reference_results.json", encoding="utf-8") as _fh:
    REF = json.load(_fh)
with open(DATA_DIR / "normalization_cases.json", encoding="utf-8") as _fh:
    CASES = json.load(_fh)
with open(DATA_DIR / "worked_example.json", encoding="utf-8") as _fh:
    WORKED = json.load(_fh)


def test_criterion_01_weighted_averages_match_printed():
    """Size-weighted per-iteration averages reproduce the printed ones
    (first two models within 0.01, third within 0.1)."""
    sizes = [REF["suite_sizes"][s] for s in REF["suites"]]
    deviations = []
    for name, model in REF["models"].items():
        tolerance = model["average_tolerance"]
        for i, (cells, printed) in enumerate(
            zip(model["accuracies"], model["printed_average"]), start=1
        ):
            computed = weighted_average(list(zip(cells, sizes)))
            if abs(computed - printed) > tolerance:
                deviations.append(
                    f"{name} iteration {i}: computed {computed:.4f}, printed "
                    f"{printed:.2f}, tolerance {tolerance}"
                )
    assert not deviations, (
        "printed averages not reproducible from their per-suite cells: "
        + "; ".join(deviations)
    )


def test_criterion_02_scoring_worked_pair_and_fixture():
    """The worked student answers grade 1 then 0, and all 50 normalization
    cases agree between the package, the fixture, and the oracle."""
    for rnd in (1, 2):
        teacher = extract_final_answer(WORKED[f"iter{rnd}_teacher_answer"])
        assert score(teacher, "2") == 1
        student = extract_final_answer(WORKED[f"iter{rnd}_student_answer"])
        assert score(student, "2") == WORKED[f"iter{rnd}_score"]
    assert WORKED["iter1_score"] == 1 and WORKED["iter2_score"] == 0

    for case in CASES:
        packaged = score(extract_final_answer(case["text"]), case["gold"])
        independent = oracle.grade(case["text"], case["gold"])
        assert packaged == independent == case["expected"]["score"], case["id"]


def test_criterion_03_every_printed_gain_cell_reproduces():
    """Each gain annotation equals the accuracy delta to iteration 1,
    rounded to two decimals — per suite and for the average column."""
    for name, model in REF["models"].items():
        base = model["accuracies"][0]
        for i, printed in enumerate(model["printed_gains"]):
            if printed is None:
                continue
            computed = [
                round(cell - first, 2)
                for cell, first in zip(model["accuracies"][i], base)
            ]
            assert computed == printed, f"{name} iteration {i + 1}"
        base_avg = model["printed_average"][0]
        for i, printed in enumerate(model["printed_average_gains"]):
            if printed is None:
                continue
            assert round(model["printed_average"][i] - base_avg, 2) == printed, (
                f"{name} average gain, iteration {i + 1}"
            )
    # the cells called out individually
    assert REF["models"]["qwen"]["printed_gains"][1][0] == 2.27
    assert REF["models"]["qwen"]["printed_gains"][2][3] == 10.70
    assert REF["models"]["llama"]["printed_gains"][1][3] == -1.00


def test_criterion_04_convergence_on_reference_series():
    """Both recorded validation curves keep going through round 3 and stop
    after round 4 with the optimum at round 3."""
    for key in ("qwen_gsm8k", "smollm_gsm8k"):
        series = REF["validation_series"][key]
        for upto in (1, 2, 3):
            assert not check_convergence(series[:upto], patience=1, K_max=4).stop, key
        decision = check_convergence(series, patience=1, K_max=4)
        assert decision.stop, key
        assert decision.best_k == 3, key


def test_criterion_05_divergence_identity_and_hand_values():
    """KL equals cross-entropy minus entropy to within 1e-12 across 1,000
    random distribution pairs, and two hand-computed values check out."""
    rng = random.Random(20260823)
    worst = 0.0
    for _ in range(1000):
        size = rng.randint(2, 32)
        outcomes = tuple(f"o{i}" for i in range(size))
        p = Categorical.normalized(
            outcomes, [rng.uniform(0.01, 1.0) for _ in range(size)]
        )
        q = Categorical.normalized(
            outcomes, [rng.uniform(0.01, 1.0) for _ in range(size)]
        )
        worst = max(worst, kl_nll_identity_check(p, q))
    assert worst < 1e-12

    assert math.isclose(exact_kl((0.5, 0.5), (0.25, 0.75)), 0.1438, abs_tol=1e-4)
    assert math.isclose(exact_kl((1.0, 0.0), (0.5, 0.5)), math.log(2), abs_tol=1e-4)


def test_criterion_06_answer_filter_soundness_under_noise(tmp_path):
    """Across 100 seeded runs where roughly 30% of teacher rationales reach
    the wrong answer, no mismatched record ever lands in a training file."""
    questions = [f"What is {i} + {i}?" for i in range(1, 13)]
    answers = {q: str(2 * i) for i, q in enumerate(questions, start=1)}
    mismatched = 0
    discarded_total = 0
    retained_total = 0
    for trial in range(100):
        rng = random.Random(trial)
        base = tmp_path / f"trial{trial:03d}"
        base.mkdir()
        corpus = simple_corpus(base / "corpus.jsonl", n=12)
        poisoned = set(rng.sample(questions, k=4))
        script = {
            q: [wrong_rationale(answers[q]) if q in poisoned else correct_rationale(answers[q])]
            for q in questions
        }
        script_path = base / "script.json"
        script_path.write_text(json.dumps(script), encoding="utf-8")

        config = toy_config(base / "run", corpus, script_path,
                            seed=trial, epochs_schedule=[2, 1])
        result = run_distillation(config)
        discarded_total += sum(r.discarded for r in result.rounds)
        for summary in result.rounds:
            data = Path(config.run_dir) / f"iter_{summary.k}" / "teacher_data.jsonl"
            for question, rationale, _ in read_training_file(data):
                retained_total += 1
                if score(extract_final_answer(rationale), answers[question]) != 1:
                    mismatched += 1
    assert mismatched == 0
    assert discarded_total > 0
    assert retained_total > 0


def test_criterion_07_staged_loop_beats_equal_epoch_baseline(tmp_path):
    """The staged toy loop climbs monotonically to ≥0.9 validation accuracy,
    beats single-round distillation with the same total epochs, repeats
    bit-for-bit under the same seed, and finishes well inside 30 seconds."""
    started = time.monotonic()
    scenario = build_staged_scenario(tmp_path)

    result = run_distillation(scenario.config(tmp_path / "iterative"))
    accuracies = result.accuracies
    peak = accuracies.index(max(accuracies))
    climb = accuracies[: peak + 1]
    assert all(b >= a for a, b in zip(climb, climb[1:]))
    assert accuracies[-1] >= 0.9

    # same 14 total epochs, no regeneration rounds
    baseline = run_standard_distillation(
        scenario.config(tmp_path / "standard", epochs_schedule=[14])
    )
    assert baseline.accuracies[-1] < accuracies[-1]

    repeat = run_distillation(scenario.config(tmp_path / "repeat"))
    assert repeat.accuracies == accuracies
    assert (tmp_path / "repeat" / MANIFEST_NAME).read_bytes() == (
        tmp_path / "iterative" / MANIFEST_NAME
    ).read_bytes()

    assert time.monotonic() - started < 30.0


def test_criterion_08_prompt_goldens_history_depth_and_budget(tmp_path):
    """Prompt builders reproduce the committed goldens byte for byte, a
    three-round history adds exactly two blocks per validation example over
    a one-round history, and an oversized prompt aborts the run reporting
    the exact token surplus."""
    entry1 = ValidationHistoryEntry(
        1, WORKED["iter1_teacher_answer"], WORKED["iter1_student_answer"],
        WORKED["iter1_score"],
    )
    entry2 = ValidationHistoryEntry(
        2, WORKED["iter2_teacher_answer"], WORKED["iter2_student_answer"],
        WORKED["iter2_score"],
    )
    initial = build_initial_teacher_prompt(
        WORKED["question"],
        exemplars=[(WORKED["question"], entry1.teacher_answer,
                    entry1.student_answer, entry1.score)],
    )
    golden_initial = (DATA_DIR / "golden_teacher_initial_prompt.txt").read_text(encoding="utf-8")
    assert initial == golden_initial

    gap = build_gap_prompt(
        GapContext(
            question=WORKED["question"],
            prev_student=WORKED["iter2_student_answer"],
            prev_teacher=WORKED["iter2_teacher_answer"],
            validation_examples=[
                ValidationExample(WORKED["question"], [entry1, entry2])
            ],
        )
    )
    golden_gap = (DATA_DIR / "golden_teacher_gap_prompt.txt").read_text(encoding="utf-8")
    assert gap == golden_gap

    def marker_count(depth: int, n_examples: int = 3) -> int:
        examples = [
            ValidationExample(
                question=f"Question {i}?",
                history=[
                    ValidationHistoryEntry(j, f"t{j}", f"s{j}", j % 2)
                    for j in range(1, depth + 1)
                ],
            )
            for i in range(n_examples)
        ]
        prompt = build_gap_prompt(
            GapContext(question="target?", prev_student="s", prev_teacher="t",
                       validation_examples=examples)
        )
        return len(iteration_indices(prompt))

    assert marker_count(3) - marker_count(1) == 2 * 3

    scenario = build_staged_scenario(tmp_path)
    config = scenario.config(tmp_path / "run", context_budget=60)
    with pytest.raises(ContextBudgetExceededError) as err:
        run_distillation(config)
    exc = err.value

    # rebuild the offending prompt from round-1 artifacts and the config
    # alone, then check the reported numbers against it
    corpus = load_corpus(config.corpus_path)
    split = split_validation(corpus, config.m, config.seed)
    iter1 = Path(config.run_dir) / "iter_1"
    teacher_by_id = {
        row["problem_id"]: row["teacher_answer"]
        for row in read_jsonl(iter1 / "val_teacher.jsonl")
    }
    graded_by_id = {g.problem_id: g for g in read_graded(iter1 / "val_scores.jsonl")}
    exemplars = [
        (p.question, teacher_by_id[p.id], graded_by_id[p.id].generation,
         graded_by_id[p.id].score)
        for p in split.validation
    ]
    first = split.train[0]
    assert exc.problem_id == first.id
    rebuilt = build_initial_teacher_prompt(
        first.question, instruction=config.instruction, exemplars=exemplars
    )
    assert estimate_tokens(rebuilt, config.chars_per_token) == exc.estimated
    assert exc.estimated > config.context_budget
    assert exc.exceeded_by == exc.estimated - config.context_budget


def test_criterion_09_interrupted_run_resumes_to_identical_manifest(tmp_path):
    """A run killed right after round 2 resumes from its artifacts and ends
    with a manifest byte-identical to an uninterrupted control run."""
    scenario = build_staged_scenario(tmp_path)
    control = scenario.config(tmp_path / "control")
    run_distillation(control)

    victim = scenario.config(tmp_path / "victim")

    def kill_after_round_two(k, run):
        if k == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_distillation(victim, after_round=kill_after_round_two)
    assert not (Path(victim.run_dir) / MANIFEST_NAME).read_bytes() == (
        Path(control.run_dir) / MANIFEST_NAME
    ).read_bytes()

    result = resume(victim.run_dir)
    assert result.resumed
    assert (Path(victim.run_dir) / MANIFEST_NAME).read_bytes() == (
        Path(control.run_dir) / MANIFEST_NAME
    ).read_bytes()
