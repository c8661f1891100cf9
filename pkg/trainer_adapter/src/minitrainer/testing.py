"""Pytest fixtures for exercising the service against a real socket.

Registered as a plugin (``-p minitrainer.testing``) rather than through a
``conftest.py`` so the fixtures can be shared without claiming the conftest
module name from suites that sit next to this one.
"""

import itertools
import json
import threading

import pytest

from .registry import init_model_root
from .service import build_server

INSTRUCTION = "Answer the question, showing your reasoning."


@pytest.fixture
def model_root(tmp_path):
    root = tmp_path / "models"
    init_model_root(root)
    return root


@pytest.fixture
def make_dataset(tmp_path):
    """Writer for small JSONL training files; returns the file path."""
    counter = itertools.count()

    def _make(n=10, rows=None, instruction=INSTRUCTION):
        path = tmp_path / f"dataset-{next(counter)}.jsonl"
        if rows is None:
            rows = [
                {
                    "question": (
                        f"If you read {i + 2} pages a day, how many pages "
                        f"do you read in {i + 3} days?"
                    ),
                    "rationale": (
                        "Multiply the daily pages by the number of days.\n"
                        f"Final Answer: {(i + 2) * (i + 3)}"
                    ),
                    "instruction": instruction,
                }
                for i in range(n)
            ]
        path.write_text(
            "".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8"
        )
        return path

    return _make


@pytest.fixture
def live_service(model_root):
    """A served adapter on an ephemeral port: yields (base_url, model_root)."""
    server = build_server("127.0.0.1", 0, model_root)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    try:
        yield f"http://{host}:{port}", model_root
    finally:
        server.shutdown()
        server.service.close()
        thread.join(timeout=5)
