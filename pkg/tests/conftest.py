"""Shared fixtures: tiny corpora, scripted-teacher runs, HTTP stubs."""

from __future__ import annotations

import http.server
import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import pytest

from gapdistill.backends import BackendHandle
from gapdistill.corpus import load_corpus, split_validation
from gapdistill.loop import RunConfig

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def correct_rationale(answer: str) -> str:
    return f"Work through the arithmetic carefully.\nFinal Answer: {answer}"


def wrong_rationale(answer: str) -> str:
    return f"A hasty guess.\nFinal Answer: {int(answer) + 1}"


def simple_corpus(path: Path, n: int = 8) -> Path:
    """n distinct one-line arithmetic problems with numeric answers."""
    rows = [
        {"id": f"p{i}", "question": f"What is {i} + {i}?", "answer": str(2 * i)}
        for i in range(1, n + 1)
    ]
    return write_jsonl(path, rows)


def toy_config(run_dir: Path, corpus: Path, script: Path, **overrides) -> RunConfig:
    settings = dict(
        run_dir=str(run_dir),
        corpus_path=str(corpus),
        seed=3,
        K_max=2,
        m=2,
        epochs_schedule=[5, 3],
        teacher=BackendHandle(kind="scripted_teacher", options={"script_path": str(script)}),
        student=BackendHandle(kind="toy_student"),
        trainer={"kind": "toy"},
    )
    settings.update(overrides)
    return RunConfig(**settings)


# ---------------------------------------------------------------------------
# the staged 40-problem scenario used by the end-to-end loop tests


@dataclass
class StagedScenario:
    """A corpus engineered so the toy loop visibly improves each round.

    20 distinct arithmetic questions appear twice each (40 problems).  The
    split seed is chosen so all 8 validation questions keep their twin on
    the training side — the memorization student can then answer a
    validation question exactly when its twin's rationale survived the
    answer filter.  The teacher script stages corrections: 4 validation
    questions answered correctly from round 1, two more fixed in round 2,
    the last two in round 3, giving validation accuracy 0.5 / 0.75 / 1.0 /
    1.0 with the optimum at round 3.
    """

    corpus_path: Path
    script_path: Path
    seed: int
    validation_questions: list[str]
    expected_accuracies: list[float]

    def config(self, run_dir: Path, **overrides) -> RunConfig:
        settings = dict(
            run_dir=str(run_dir),
            corpus_path=str(self.corpus_path),
            seed=self.seed,
            K_max=4,
            m=8,
            patience=1,
            epochs_schedule=[5, 3, 3, 3],
            teacher=BackendHandle(
                kind="scripted_teacher", options={"script_path": str(self.script_path)}
            ),
            student=BackendHandle(kind="toy_student"),
            trainer={"kind": "toy"},
        )
        settings.update(overrides)
        return RunConfig(**settings)


def build_staged_scenario(base_dir: Path) -> StagedScenario:
    questions = [f"Compute {11 + 3 * i} + {7 + 2 * i}." for i in range(20)]
    answers = [str((11 + 3 * i) + (7 + 2 * i)) for i in range(20)]
    rows = []
    for i, (q, a) in enumerate(zip(questions, answers)):
        rows.append({"id": f"q{i:02d}a", "question": q, "answer": a})
        rows.append({"id": f"q{i:02d}b", "question": q, "answer": a})
    corpus_path = write_jsonl(base_dir / "staged_corpus.jsonl", rows)
    problems = load_corpus(corpus_path)

    seed = None
    for candidate in range(200):
        split = split_validation(problems, 8, candidate)
        texts = [p.question for p in split.validation]
        if len(set(texts)) == 8:
            seed = candidate
            break
    assert seed is not None, "no split seed kept all validation twins trainable"

    split = split_validation(problems, 8, seed)
    val_texts = [p.question for p in split.validation]
    answer_of = {q: a for q, a in zip(questions, answers)}

    script: dict[str, list[str]] = {}
    for q in questions:
        good = correct_rationale(answer_of[q])
        bad = wrong_rationale(answer_of[q])
        if q in val_texts[4:6]:
            script[q] = [bad, good]
        elif q in val_texts[6:8]:
            script[q] = [bad, bad, good]
        else:
            script[q] = [good]
    script_path = base_dir / "staged_teacher.json"
    script_path.write_text(json.dumps(script), encoding="utf-8")

    return StagedScenario(
        corpus_path=corpus_path,
        script_path=script_path,
        seed=seed,
        validation_questions=val_texts,
        expected_accuracies=[0.5, 0.75, 1.0, 1.0],
    )


@pytest.fixture
def staged_scenario(tmp_path) -> StagedScenario:
    return build_staged_scenario(tmp_path)


# ---------------------------------------------------------------------------
# in-process HTTP stubs


class _StubHandler(http.server.BaseHTTPRequestHandler):
    def _dispatch(self, body):
        status, payload = self.server.app.handle(self.command, self.path, body)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        self._dispatch(json.loads(raw or b"{}"))

    def do_GET(self):
        self._dispatch(None)

    def log_message(self, *args):
        pass


@contextmanager
def http_stub(app):
    """Serve ``app.handle(method, path, body) -> (status, payload)`` on an
    ephemeral localhost port."""
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.app = app
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join(timeout=5)
        server.server_close()
