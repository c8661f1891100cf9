"""HTTP fine-tuning service around the tiny model.

Implements the poll-based trainer wire contract:

* ``POST /finetune`` with ``{"base_checkpoint", "dataset_path", "epochs",
  "instruction", "hyper"}`` returns ``{"checkpoint_id"}``.  The id is
  content-addressed and doubles as the job id.
* ``GET /status/<id>`` returns ``{"state", "detail"}`` where state is one of
  ``pending | running | done | failed``.  Unknown ids get a 404.
* ``GET /checkpoints/<id>`` returns the registered metadata (lineage, loss
  curve and friends).

plus an OpenAI-style ``POST /v1/completions`` (and ``/v1/chat/completions``)
endpoint so trained checkpoints can be queried for answers.  Requests whose
prompt exceeds the configured context size get a 400 whose error code names
the context length, which clients recognise as an overflow rather than a
generic server error.

Malformed *requests* are rejected up front with a 400.  Problems only
discoverable while running the job -- a base checkpoint that does not load,
a dataset line that does not parse -- fail the job instead, with a detail
message naming the culprit.  One job trains at a time; later submissions
queue behind it, and status stays readable throughout.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .model import TinyLM, fine_tune
from .registry import (
    UnknownCheckpointError,
    checkpoint_exists,
    checkpoint_id_for,
    dataset_digest,
    load_checkpoint,
    register_checkpoint,
)

JOB_STATES = ("pending", "running", "done", "failed")

QUESTION_MARKER = "### question:"

#: Hyperparameters a job may override, with their defaults.  Anything else
#: in ``hyper`` is rejected rather than silently dropped.
HYPER_DEFAULTS = {"learning_rate": 1.0}


class RequestError(ValueError):
    """A submission that violates the request schema (400-class)."""


class JobError(RuntimeError):
    """A failure discovered while executing an accepted job."""


class DatasetError(ValueError):
    """A training file whose content is malformed."""


@dataclass
class TrainerJobRecord:
    """One fine-tuning job as seen by the status endpoint."""

    job_id: str
    request: dict
    state: str = "pending"
    checkpoint_id: str | None = None
    detail: str = "queued"
    log_tail: list[str] = field(default_factory=list)


def read_dataset(path: Path) -> list[tuple[str, str]]:
    """Parse a JSONL training file into (question, rationale) pairs.

    Every row must be an object with non-empty string ``question`` and
    ``rationale`` fields (plus a string ``instruction``).  Violations raise
    :class:`DatasetError` naming the offending line.
    """
    pairs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                raise DatasetError(f"line {lineno}: blank line")
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DatasetError(f"line {lineno}: expected an object")
            for key in ("question", "rationale", "instruction"):
                if key not in row:
                    raise DatasetError(f"line {lineno}: missing field '{key}'")
                if not isinstance(row[key], str):
                    raise DatasetError(f"line {lineno}: field '{key}' must be a string")
            if not row["question"].strip():
                raise DatasetError(f"line {lineno}: field 'question' is empty")
            if not row["rationale"].strip():
                raise DatasetError(f"line {lineno}: field 'rationale' is empty")
            pairs.append((row["question"], row["rationale"]))
    if not pairs:
        raise DatasetError("file is empty")
    return pairs


def normalize_request(payload: object) -> dict:
    """Validate a ``/finetune`` body and derive the job's checkpoint id.

    Returns the request dict extended with ``dataset_digest`` and
    ``checkpoint_id``.  Raises :class:`RequestError` on any schema
    violation, including a dataset path that cannot be read at all --
    content-level problems inside the file are left for the job itself.
    """
    if not isinstance(payload, dict):
        raise RequestError("request body must be a JSON object")
    for key in ("base_checkpoint", "dataset_path", "instruction"):
        if key not in payload:
            raise RequestError(f"missing field '{key}'")
        if not isinstance(payload[key], str):
            raise RequestError(f"field '{key}' must be a string")
    if not payload["base_checkpoint"]:
        raise RequestError("field 'base_checkpoint' is empty")
    epochs = payload.get("epochs")
    if isinstance(epochs, bool) or not isinstance(epochs, int):
        raise RequestError("field 'epochs' must be an integer")
    if epochs < 1:
        raise RequestError("field 'epochs' must be >= 1")
    hyper = payload.get("hyper", {})
    if not isinstance(hyper, dict):
        raise RequestError("field 'hyper' must be an object")
    for key, value in hyper.items():
        if key not in HYPER_DEFAULTS:
            raise RequestError(f"unknown hyper key '{key}'")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RequestError(f"hyper key '{key}' must be a number")
        if value <= 0:
            raise RequestError(f"hyper key '{key}' must be positive")
    dataset_path = Path(payload["dataset_path"])
    try:
        digest = dataset_digest(dataset_path)
    except OSError as exc:
        raise RequestError(f"dataset file not readable: {exc}") from exc
    normalized = {
        "base_checkpoint": payload["base_checkpoint"],
        "dataset_path": str(dataset_path),
        "epochs": epochs,
        "instruction": payload["instruction"],
        "hyper": dict(hyper),
        "dataset_digest": digest,
    }
    normalized["checkpoint_id"] = checkpoint_id_for(
        normalized["base_checkpoint"],
        digest,
        epochs,
        normalized["instruction"],
        normalized["hyper"],
    )
    return normalized


def execute_job(model_root: Path, request: dict) -> tuple[str, list[float]]:
    """Run one normalized fine-tuning job to a registered checkpoint.

    Returns the checkpoint id and the per-epoch loss curve.  Raises
    :class:`JobError` for failures that belong on the job record: an
    unloadable base checkpoint or a malformed dataset line.
    """
    base_id = request["base_checkpoint"]
    try:
        base_model, base_meta = load_checkpoint(model_root, base_id)
    except UnknownCheckpointError:
        raise JobError(f"base checkpoint '{base_id}' is not loadable: not in registry")
    except (ValueError, KeyError, OSError) as exc:
        raise JobError(f"base checkpoint '{base_id}' is not loadable: {exc}") from exc

    dataset_path = request["dataset_path"]
    try:
        pairs = read_dataset(Path(dataset_path))
    except DatasetError as exc:
        raise JobError(f"dataset {dataset_path}: {exc}") from exc
    except OSError as exc:
        raise JobError(f"dataset {dataset_path}: {exc}") from exc

    hyper = {**HYPER_DEFAULTS, **request["hyper"]}
    model, curve = fine_tune(
        base_model,
        pairs,
        epochs=request["epochs"],
        learning_rate=float(hyper["learning_rate"]),
    )
    checkpoint_id = request["checkpoint_id"]
    meta = {
        "checkpoint_id": checkpoint_id,
        "base_checkpoint": base_id,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "epochs": request["epochs"],
        "instruction": request["instruction"],
        "dataset_digest": request["dataset_digest"],
        "loss_curve": curve,
        "lineage": list(base_meta.get("lineage", []))
        + [
            {
                "base": base_id,
                "dataset_digest": request["dataset_digest"],
                "epochs": request["epochs"],
            }
        ],
    }
    register_checkpoint(model_root, checkpoint_id, model, meta)
    return checkpoint_id, curve


def extract_question(prompt: str) -> str:
    """The target question of a rendered eval prompt.

    Prompts put the question to answer after the *last* ``### question:``
    marker (earlier markers belong to worked exemplars).  A prompt without
    the marker is treated as being the question itself.
    """
    pos = prompt.rfind(QUESTION_MARKER)
    if pos < 0:
        return prompt.strip()
    body = prompt[pos + len(QUESTION_MARKER) :]
    cut = body.find("\n### ")
    if cut >= 0:
        body = body[:cut]
    return body.strip()


class AdapterService:
    """Job table, worker thread and request handling, sans HTTP plumbing."""

    def __init__(self, model_root: Path, context_chars: int = 32768):
        self.model_root = Path(model_root)
        self.context_chars = context_chars
        self._records: dict[str, TrainerJobRecord] = {}
        self._lock = threading.Lock()
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._model_cache: dict[str, TinyLM] = {}
        self._worker = threading.Thread(
            target=self._work, name="minitrainer-worker", daemon=True
        )
        self._worker.start()

    def close(self) -> None:
        self._queue.put(None)
        self._worker.join(timeout=5)

    # -- job lifecycle ---------------------------------------------------

    def submit(self, payload: object) -> tuple[int, dict]:
        try:
            request = normalize_request(payload)
        except RequestError as exc:
            return 400, {"error": str(exc)}
        job_id = request["checkpoint_id"]
        with self._lock:
            if job_id not in self._records:
                if checkpoint_exists(self.model_root, job_id):
                    # Identical job already trained: content addressing makes
                    # re-registration a no-op, so the record is born done.
                    self._records[job_id] = TrainerJobRecord(
                        job_id=job_id,
                        request=request,
                        state="done",
                        checkpoint_id=job_id,
                        detail="already registered",
                    )
                else:
                    self._records[job_id] = TrainerJobRecord(job_id=job_id, request=request)
                    self._queue.put(job_id)
        return 200, {"checkpoint_id": job_id}

    def status(self, job_id: str) -> tuple[int, dict]:
        with self._lock:
            record = self._records.get(job_id)
            if record is not None:
                return 200, {"state": record.state, "detail": record.detail}
        # No live record (say, after a restart) but the checkpoint is on
        # disk: that job is done by any useful definition.
        if checkpoint_exists(self.model_root, job_id):
            return 200, {"state": "done", "detail": "registered"}
        return 404, {"error": f"unknown job '{job_id}'"}

    def checkpoint_meta(self, checkpoint_id: str) -> tuple[int, dict]:
        try:
            _, meta = load_checkpoint(self.model_root, checkpoint_id)
        except UnknownCheckpointError:
            return 404, {"error": f"unknown checkpoint '{checkpoint_id}'"}
        return 200, meta

    def _work(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            with self._lock:
                record = self._records[job_id]
                record.state = "running"
                record.detail = "training"
            try:
                checkpoint_id, curve = execute_job(self.model_root, record.request)
            except JobError as exc:
                with self._lock:
                    record.state = "failed"
                    record.detail = str(exc)
                continue
            except Exception as exc:  # a bug, but the job must still settle
                with self._lock:
                    record.state = "failed"
                    record.detail = f"internal error: {type(exc).__name__}: {exc}"
                continue
            lines = [f"epoch {i}: loss {value:.6f}" for i, value in enumerate(curve)]
            with self._lock:
                record.checkpoint_id = checkpoint_id
                record.detail = (
                    f"trained {record.request['epochs']} epoch(s); "
                    f"loss {curve[0]:.4f} -> {curve[-1]:.4f}"
                )
                record.log_tail = lines[-10:]
                record.state = "done"

    # -- inference -------------------------------------------------------

    def _load_model(self, checkpoint_id: str) -> TinyLM:
        with self._lock:
            cached = self._model_cache.get(checkpoint_id)
        if cached is not None:
            return cached
        model, _ = load_checkpoint(self.model_root, checkpoint_id)
        with self._lock:
            self._model_cache[checkpoint_id] = model
        return model

    def completions(self, payload: object, chat: bool = False) -> tuple[int, dict]:
        if not isinstance(payload, dict):
            return 400, {"error": "request body must be a JSON object"}
        model_id = payload.get("model")
        if not isinstance(model_id, str) or not model_id:
            return 400, {"error": "missing field 'model'"}
        if chat:
            messages = payload.get("messages")
            if not isinstance(messages, list) or not messages:
                return 400, {"error": "missing field 'messages'"}
            last = messages[-1]
            prompt = last.get("content") if isinstance(last, dict) else None
            if not isinstance(prompt, str):
                return 400, {"error": "last message has no string 'content'"}
        else:
            prompt = payload.get("prompt")
            if not isinstance(prompt, str):
                return 400, {"error": "missing field 'prompt'"}
        if len(prompt) > self.context_chars:
            return 400, {
                "error": {
                    "code": "context_length_exceeded",
                    "message": (
                        f"prompt of {len(prompt)} chars exceeds the "
                        f"{self.context_chars}-char context window"
                    ),
                }
            }
        try:
            model = self._load_model(model_id)
        except UnknownCheckpointError:
            return 404, {"error": {"message": f"unknown model '{model_id}'"}}
        text = model.predict(extract_question(prompt))
        if chat:
            choice = {"index": 0, "message": {"role": "assistant", "content": text}}
        else:
            choice = {"index": 0, "text": text, "finish_reason": "stop"}
        return 200, {
            "object": "chat.completion" if chat else "text_completion",
            "model": model_id,
            "choices": [choice],
        }


class _Handler(BaseHTTPRequestHandler):
    service: AdapterService  # assigned by build_server

    def log_message(self, *args) -> None:  # keep test output clean
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> object:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        return json.loads(raw.decode("utf-8"))

    def do_POST(self) -> None:
        try:
            payload = self._read_json()
        except (ValueError, UnicodeDecodeError):
            self._send(400, {"error": "request body is not valid JSON"})
            return
        if self.path == "/finetune":
            code, reply = self.service.submit(payload)
        elif self.path in ("/completions", "/v1/completions"):
            code, reply = self.service.completions(payload)
        elif self.path in ("/chat/completions", "/v1/chat/completions"):
            code, reply = self.service.completions(payload, chat=True)
        else:
            code, reply = 404, {"error": f"no such endpoint '{self.path}'"}
        self._send(code, reply)

    def do_GET(self) -> None:
        if self.path.startswith("/status/"):
            code, reply = self.service.status(self.path[len("/status/") :])
        elif self.path.startswith("/checkpoints/"):
            code, reply = self.service.checkpoint_meta(self.path[len("/checkpoints/") :])
        elif self.path == "/healthz":
            code, reply = 200, {"ok": True}
        else:
            code, reply = 404, {"error": f"no such endpoint '{self.path}'"}
        self._send(code, reply)


def build_server(
    host: str, port: int, model_root: Path, context_chars: int = 32768
) -> ThreadingHTTPServer:
    """A ready-to-run HTTP server bound to ``host:port`` (0 = ephemeral).

    The server owns an :class:`AdapterService`; call ``server.service.close()``
    after ``server.shutdown()`` to stop the training worker.
    """
    service = AdapterService(model_root, context_chars=context_chars)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.service = service  # type: ignore[attr-defined]
    return server


def serve(bind_address: str, model_root: Path, context_chars: int = 32768) -> None:
    """Run the service until interrupted (the CLI entry point)."""
    host, _, port = bind_address.rpartition(":")
    server = build_server(host or "127.0.0.1", int(port), model_root, context_chars)
    try:
        server.serve_forever()
    finally:
        server.shutdown()
        server.service.close()  # type: ignore[attr-defined]
