"""Prompt assembly against committed golden files plus budget mechanics."""

import json

import pytest

from gapdistill.prompts import (
    GapContext,
    ValidationExample,
    ValidationHistoryEntry,
    build_gap_prompt,
    build_initial_teacher_prompt,
    build_student_prompt,
    build_student_train_prompt,
    check_budget,
    drop_oldest_round,
    estimate_tokens,
    foreign_markers,
    iteration_indices,
    last_question_block,
    load_template,
)

from conftest import DATA_DIR


@pytest.fixture(scope="module")
def worked():
    with open(DATA_DIR / "worked_example.json", encoding="utf-8") as fh:
        return json.load(fh)


def _history(worked, rounds=2):
    entries = [
        ValidationHistoryEntry(
            iteration=i,
            teacher_answer=worked[f"iter{i}_teacher_answer"],
            student_answer=worked[f"iter{i}_student_answer"],
            score=worked[f"iter{i}_score"],
        )
        for i in (1, 2)[:rounds]
    ]
    return entries


def test_initial_teacher_prompt_matches_golden(worked):
    q = worked["question"]
    prompt = build_initial_teacher_prompt(
        q,
        exemplars=[
            (q, worked["iter1_teacher_answer"], worked["iter1_student_answer"], worked["iter1_score"])
        ],
    )
    golden = (DATA_DIR / "golden_teacher_initial_prompt.txt").read_text(encoding="utf-8")
    assert prompt == golden


def test_gap_prompt_matches_golden(worked):
    q = worked["question"]
    gap = GapContext(
        question=q,
        prev_student=worked["iter2_student_answer"],
        prev_teacher=worked["iter2_teacher_answer"],
        validation_examples=[ValidationExample(question=q, history=_history(worked))],
    )
    golden = (DATA_DIR / "golden_teacher_gap_prompt.txt").read_text(encoding="utf-8")
    assert build_gap_prompt(gap) == golden


def test_initial_prompt_has_no_iteration_markers(worked):
    q = worked["question"]
    prompt = build_initial_teacher_prompt(q, exemplars=[(q, "t", "s", 1)])
    assert iteration_indices(prompt) == []


def test_gap_prompt_iteration_blocks_grow_with_history(worked):
    q = worked["question"]
    history = _history(worked)
    examples3 = [ValidationExample(question=f"{q} #{i}", history=history) for i in range(3)]
    gap = GapContext(question=q, prev_student="s", prev_teacher="t", validation_examples=examples3)
    prompt = build_gap_prompt(gap)
    assert iteration_indices(prompt) == [1, 2] * 3
    assert foreign_markers(prompt) == []


def test_gap_prompt_target_is_last_question(worked):
    gap = GapContext(
        question="TARGET-QUESTION",
        prev_student="s",
        prev_teacher="t",
        validation_examples=[ValidationExample(question="peer", history=_history(worked, 1))],
    )
    assert last_question_block(build_gap_prompt(gap)) == "TARGET-QUESTION"


def test_history_validation():
    bad = ValidationExample(
        question="q",
        history=[
            ValidationHistoryEntry(1, "t", "s", 1),
            ValidationHistoryEntry(3, "t", "s", 0),
        ],
    )
    gap = GapContext(question="q", prev_student="s", prev_teacher="t", validation_examples=[bad])
    with pytest.raises(ValueError, match="gap"):
        build_gap_prompt(gap)

    empty = ValidationExample(question="q", history=[])
    gap = GapContext(question="q", prev_student="s", prev_teacher="t", validation_examples=[empty])
    with pytest.raises(ValueError, match="empty history"):
        build_gap_prompt(gap)


def test_history_may_start_late_after_pruning():
    example = ValidationExample(
        question="q",
        history=[ValidationHistoryEntry(2, "t", "s", 1), ValidationHistoryEntry(3, "t", "s", 0)],
    )
    gap = GapContext(question="q", prev_student="s", prev_teacher="t", validation_examples=[example])
    assert iteration_indices(build_gap_prompt(gap)) == [2, 3]


def test_student_prompt_layout():
    prompt = build_student_prompt(
        "What is 2+2?",
        "Answer carefully.",
        few_shot=[("What is 1+1?", "1+1 = 2.\nFinal Answer: 2")],
    )
    assert prompt.startswith("Answer carefully.")
    assert prompt.count("### question:") == 2
    assert last_question_block(prompt) == "What is 2+2?"


def test_student_train_prompt_has_single_question():
    prompt = build_student_train_prompt("What is 2+2?", "Solve it.")
    assert prompt.count("### question:") == 1
    assert last_question_block(prompt) == "What is 2+2?"


def test_load_template_unknown_name():
    with pytest.raises(FileNotFoundError):
        load_template("no_such_template.tmpl")


def test_template_dir_override(tmp_path):
    (tmp_path / "student_train.tmpl").write_text(
        "CUSTOM {{instruction}} | {{question}}", encoding="utf-8"
    )
    prompt = build_student_train_prompt("Q", "I", template_dir=tmp_path)
    assert prompt == "CUSTOM I | Q"


# ---------------------------------------------------------------------------
# token budget


def test_estimate_tokens_rounds_up():
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcde", chars_per_token=5) == 1
    with pytest.raises(ValueError):
        estimate_tokens("x", chars_per_token=0)


def test_check_budget_boundary_is_inclusive():
    text = "x" * 40  # exactly 10 tokens
    assert check_budget(text, 10).ok
    assert check_budget(text, 10).exceeded_by == 0
    over = check_budget(text, 9)
    assert not over.ok
    assert over.estimated == 10
    assert over.exceeded_by == 1


def _gap_with_rounds(questions, rounds):
    examples = [
        ValidationExample(
            question=q,
            history=[ValidationHistoryEntry(i, f"t{i}", f"s{i}", i % 2) for i in rounds],
        )
        for q in questions
    ]
    return GapContext(question="target", prev_student="s", prev_teacher="t", validation_examples=examples)


def test_drop_oldest_round_removes_whole_round():
    gap = _gap_with_rounds(["a", "b"], rounds=[1, 2, 3])
    pruned = drop_oldest_round(gap.validation_examples)
    assert [e.iteration for e in pruned[0].history] == [2, 3]
    assert [e.iteration for e in pruned[1].history] == [2, 3]
    # the original examples are untouched
    assert [e.iteration for e in gap.validation_examples[0].history] == [1, 2, 3]

    smaller = GapContext(
        question=gap.question,
        prev_student=gap.prev_student,
        prev_teacher=gap.prev_teacher,
        validation_examples=pruned,
    )
    assert len(build_gap_prompt(smaller)) < len(build_gap_prompt(gap))


def test_drop_oldest_round_refuses_to_empty_history():
    gap = _gap_with_rounds(["a"], rounds=[2])
    with pytest.raises(ValueError, match="last history entry"):
        drop_oldest_round(gap.validation_examples)


def test_last_question_block_absent():
    assert last_question_block("no markers here") is None
