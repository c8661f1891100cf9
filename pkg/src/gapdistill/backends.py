"""Generation and fine-tuning backends.

Two families:

* **Toy backends** for desk-scale runs and tests — a scripted teacher that
  looks its answers up from a per-round script, and a count-based
  memorization student.  Both are deterministic.
* **HTTP backends** speaking the OpenAI completions wire shape for
  generation, and the trainer wire contract
  (``POST /finetune`` -> ``{"checkpoint_id"}``,
  ``GET /status/{id}`` -> ``{"state", "detail"}``) for fine-tuning, plus a
  subprocess variant of the same contract over stdin/stdout.

Fine-tuning never mutates its base checkpoint: trainers return a new
checkpoint id and the base keeps generating exactly what it did before.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor

import requests

from .prompts import MARKER_TEACHER, iteration_indices, last_question_block

#: weight multiplier applied to a question's stored rationales when new
#: training arrives for it; small enough that one epoch of fresh data
#: outweighs anything accumulated earlier (recency dominance).
TOY_DECAY = 0.1

DEFAULT_RETRY_ATTEMPTS = 3
DEFAULT_RETRY_BACKOFF = 0.5

_jitter = random.Random()


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Transient transport failure that survived all retry attempts."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ServerError(BackendError):
    """The server answered with a non-retryable error."""


class ContextOverflowError(BackendError):
    """The server rejected the request because the prompt exceeds its context."""


class TrainerError(BackendError):
    """Fine-tuning failed (job rejected, job failed, or bad trainer reply)."""


@dataclass
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    stop: tuple[str, ...] = ()
    seed: int | None = None

    def to_json_obj(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stop": list(self.stop),
            "seed": self.seed,
        }


@dataclass
class BackendHandle:
    """Declarative description of a generation backend (lives in config)."""

    kind: str  # openai-http | scripted_teacher | toy_student
    model_name: str = ""
    endpoint: str = ""
    role: str = ""
    options: dict = field(default_factory=dict)


@dataclass
class CheckpointHandle:
    """An opaque reference to trained student weights.

    ``lineage`` lists ``(round index, dataset digest)`` pairs, one per
    fine-tune applied on the way to this checkpoint.
    """

    id: str
    lineage: list = field(default_factory=list)
    created_at: str = ""

    def to_json_obj(self) -> dict:
        return {"id": self.id, "lineage": self.lineage, "created_at": self.created_at}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CheckpointHandle":
        return cls(
            id=obj["id"],
            lineage=[list(entry) for entry in obj.get("lineage", [])],
            created_at=obj.get("created_at", ""),
        )


@dataclass
class FineTuneJob:
    base: CheckpointHandle
    dataset_path: str
    epochs: int
    instruction: str
    hyper: dict = field(default_factory=dict)


@dataclass
class GenerationResult:
    text: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# ---------------------------------------------------------------------------
# training data files


def write_training_file(records: list[tuple[str, str, str]], path: str | Path) -> None:
    """Write (question, rationale, instruction) triples as training JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for question, rationale, instruction in records:
            fh.write(
                json.dumps(
                    {"question": question, "rationale": rationale, "instruction": instruction},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_training_file(path: str | Path) -> list[tuple[str, str, str]]:
    """Read and validate a training JSONL file."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"training dataset not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            for req in ("question", "rationale", "instruction"):
                if req not in obj or not isinstance(obj[req], str):
                    raise ValueError(f"{path}: line {lineno}: missing or non-string {req!r}")
            if not obj["question"].strip() or not obj["rationale"].strip():
                raise ValueError(f"{path}: line {lineno}: empty question or rationale")
            records.append((obj["question"], obj["rationale"], obj["instruction"]))
    if not records:
        raise ValueError(f"training dataset is empty: {path}")
    return records


def dataset_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# toy backends


class ScriptedTeacher:
    """Table-driven teacher: question -> one rationale per round.

    The round is inferred from the prompt itself, so the teacher is
    stateless across calls (resume-safe): the highest ``### ITERATION j:``
    index plus one when history blocks are present, round 2 for the
    headerless exemplar prompt, round 1 otherwise.  Scripts shorter than the
    requested round repeat their last entry.
    """

    kind = "scripted_teacher"

    def __init__(self, table: dict[str, list[str] | str]):
        self.table = {q: [r] if isinstance(r, str) else list(r) for q, r in table.items()}
        for q, seq in self.table.items():
            if not seq:
                raise ValueError(f"scripted teacher entry for {q!r} is empty")
        self.calls = 0
        self.calls_by_question: dict[str, int] = {}

    @classmethod
    def from_script_file(cls, path: str | Path) -> "ScriptedTeacher":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def _round_of(self, prompt: str) -> int:
        indices = iteration_indices(prompt)
        if indices:
            return max(indices) + 1
        if MARKER_TEACHER in prompt:
            return 2
        return 1

    def _question_of(self, prompt: str) -> str:
        block = last_question_block(prompt)
        if block is not None and block in self.table:
            return block
        # containment fallback: the hit appearing last in the prompt wins,
        # so exemplar questions never shadow the target question.
        best, best_pos = None, -1
        for question in self.table:
            pos = prompt.rfind(question)
            if pos > best_pos:
                best, best_pos = question, pos
        if best is None or best_pos == -1:
            raise BackendError("scripted teacher: prompt matches no scripted question")
        return best

    def generate(self, prompt: str, params: GenerationParams | None = None) -> str:
        self.calls += 1
        question = self._question_of(prompt)
        self.calls_by_question[question] = self.calls_by_question.get(question, 0) + 1
        seq = self.table[question]
        return seq[min(self._round_of(prompt) - 1, len(seq) - 1)]


class ToyStudentModel:
    """Count-based memorization with recency weighting.

    Training on (question, rationale) decays whatever the question already
    stores by :data:`TOY_DECAY` and adds ``epochs`` weight to the new
    rationale, so the most recent rationale dominates while repeated epochs
    strengthen it.  Generation returns the heaviest stored rationale
    (most-recent wins ties) or the configured fallback text for unseen
    questions.
    """

    def __init__(self, fallback: str = "I do not know how to solve this."):
        self.fallback = fallback
        self.steps = 0
        # question -> list of [rationale, weight, last_step]
        self.memory: dict[str, list[list]] = {}

    def clone(self) -> "ToyStudentModel":
        model = ToyStudentModel(self.fallback)
        model.steps = self.steps
        model.memory = {q: [list(entry) for entry in entries] for q, entries in self.memory.items()}
        return model

    def respond(self, question: str) -> str:
        entries = self.memory.get(question)
        if not entries:
            return self.fallback
        best = max(entries, key=lambda e: (e[1], e[2]))
        return best[0]

    def _train_one(self, question: str, rationale: str, epochs: int) -> None:
        entries = self.memory.setdefault(question, [])
        for entry in entries:
            entry[1] *= TOY_DECAY
        self.steps += 1
        for entry in entries:
            if entry[0] == rationale:
                entry[1] += float(epochs)
                entry[2] = self.steps
                return
        entries.append([rationale, float(epochs), self.steps])

    def to_json_obj(self) -> dict:
        return {"fallback": self.fallback, "steps": self.steps, "memory": self.memory}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ToyStudentModel":
        model = cls(obj["fallback"])
        model.steps = obj["steps"]
        model.memory = {q: [list(e) for e in entries] for q, entries in obj["memory"].items()}
        return model


def train_toy_student(
    base: ToyStudentModel, pairs: list[tuple[str, str]], epochs: int
) -> ToyStudentModel:
    """Return a newly trained toy student; ``base`` is left untouched."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    model = base.clone()
    for question, rationale in pairs:
        model._train_one(question, rationale, epochs)
    return model


class ToyStudentBackend:
    """Serves generations from a registry of toy-student checkpoints."""

    kind = "toy_student"

    def __init__(self, fallback: str = "I do not know how to solve this."):
        self.registry: dict[str, ToyStudentModel] = {"init": ToyStudentModel(fallback)}
        self.active_id = "init"
        self.calls = 0

    def select(self, checkpoint_id: str) -> None:
        if checkpoint_id not in self.registry:
            raise BackendError(f"unknown checkpoint {checkpoint_id!r}")
        self.active_id = checkpoint_id

    def _question_of(self, prompt: str, model: ToyStudentModel) -> str | None:
        block = last_question_block(prompt)
        if block is not None:
            return block
        best, best_pos = None, -1
        for question in model.memory:
            pos = prompt.rfind(question)
            if pos > best_pos:
                best, best_pos = question, pos
        return best

    def generate(
        self,
        prompt: str,
        params: GenerationParams | None = None,
        checkpoint_id: str | None = None,
    ) -> str:
        self.calls += 1
        model = self.registry[checkpoint_id or self.active_id]
        question = self._question_of(prompt, model)
        if question is None:
            return model.fallback
        return model.respond(question)


class ToyTrainer:
    """In-process trainer over a :class:`ToyStudentBackend` registry."""

    kind = "toy"

    def __init__(self, backend: ToyStudentBackend):
        self.backend = backend

    def fine_tune(self, job: FineTuneJob) -> CheckpointHandle:
        if job.base.id not in self.backend.registry:
            raise TrainerError(f"unknown base checkpoint {job.base.id!r}")
        records = read_training_file(job.dataset_path)
        base_model = self.backend.registry[job.base.id]
        trained = train_toy_student(
            base_model, [(q, r) for q, r, _ in records], job.epochs
        )
        digest = dataset_digest(job.dataset_path)
        new_id = "ck" + hashlib.sha256(
            f"{job.base.id}|{digest}|{job.epochs}|{job.instruction}".encode("utf-8")
        ).hexdigest()[:16]
        self.backend.registry[new_id] = trained
        return CheckpointHandle(
            id=new_id,
            lineage=job.base.lineage + [[len(job.base.lineage) + 1, digest]],
            created_at=_utc_now(),
        )


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# HTTP generation (OpenAI-compatible completions)


class HttpTextBackend:
    """Minimal OpenAI-compatible completions client with bounded retries.

    ``endpoint`` is the API base (e.g. ``http://host:8080/v1``); the client
    appends ``/completions`` or ``/chat/completions`` depending on
    ``api_mode``.  Transient transport failures and 5xx replies are retried
    with exponential backoff plus jitter; 4xx replies raise immediately —
    as :class:`ContextOverflowError` when the server reports the prompt
    blew its context window, else :class:`ServerError`.
    """

    kind = "openai-http"

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_mode: str = "completions",
        api_key_env: str = "",
        timeout: float = 120.0,
        retry_attempts: int = DEFAULT_RETRY_ATTEMPTS,
        retry_backoff: float = DEFAULT_RETRY_BACKOFF,
        session: requests.Session | None = None,
    ):
        if api_mode not in ("completions", "chat"):
            raise ValueError(f"api_mode must be 'completions' or 'chat', got {api_mode!r}")
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.api_mode = api_mode
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retry_attempts = retry_attempts
        self.retry_backoff = retry_backoff
        self.session = session or requests.Session()
        self.calls = 0

    @classmethod
    def from_handle(cls, handle: BackendHandle) -> "HttpTextBackend":
        opts = handle.options
        return cls(
            endpoint=handle.endpoint,
            model_name=handle.model_name,
            api_mode=opts.get("api_mode", "completions"),
            api_key_env=opts.get("api_key_env", ""),
            timeout=opts.get("timeout", 120.0),
            retry_attempts=opts.get("retry_attempts", DEFAULT_RETRY_ATTEMPTS),
            retry_backoff=opts.get("retry_backoff", DEFAULT_RETRY_BACKOFF),
        )

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, prompt: str, params: GenerationParams, model_name: str) -> tuple[str, dict]:
        body: dict = {
            "model": model_name,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.stop:
            body["stop"] = list(params.stop)
        if params.seed is not None:
            body["seed"] = params.seed
        if self.api_mode == "chat":
            body["messages"] = [{"role": "user", "content": prompt}]
            return self.endpoint + "/chat/completions", body
        body["prompt"] = prompt
        return self.endpoint + "/completions", body

    @staticmethod
    def _is_context_overflow(detail: dict | str) -> bool:
        if isinstance(detail, dict):
            code = str(detail.get("code", ""))
            message = str(detail.get("message", ""))
        else:
            code, message = "", str(detail)
        blob = (code + " " + message).lower()
        return "context_length" in blob or "context window" in blob or (
            "context" in blob and "length" in blob
        )

    def generate(
        self,
        prompt: str,
        params: GenerationParams | None = None,
        checkpoint_id: str | None = None,
    ) -> str:
        params = params or GenerationParams()
        url, body = self._payload(prompt, params, checkpoint_id or self.model_name)
        last_exc: Exception | None = None
        for attempt in range(self.retry_attempts):
            if attempt:
                delay = self.retry_backoff * (2 ** (attempt - 1))
                time.sleep(delay + _jitter.uniform(0, delay * 0.25))
            self.calls += 1
            try:
                resp = self.session.post(
                    url, json=body, headers=self._headers(), timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = ServerError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                continue
            if resp.status_code >= 400:
                try:
                    detail = resp.json().get("error", resp.text)
                except ValueError:
                    detail = resp.text
                if self._is_context_overflow(detail):
                    raise ContextOverflowError(str(detail))
                raise ServerError(f"HTTP {resp.status_code}: {detail}")
            try:
                payload = resp.json()
                choice = payload["choices"][0]
                text = choice["message"]["content"] if self.api_mode == "chat" else choice["text"]
            except (ValueError, KeyError, IndexError) as exc:
                raise ServerError(f"malformed completion response: {exc}") from exc
            return text
        raise TransportError(str(last_exc), attempts=self.retry_attempts)


# ---------------------------------------------------------------------------
# module-level dispatch


def create_backend(handle: BackendHandle):
    """Materialize a runtime backend from its declarative handle."""
    if handle.kind == "openai-http":
        return HttpTextBackend.from_handle(handle)
    if handle.kind == "scripted_teacher":
        script_path = handle.options.get("script_path")
        if not script_path:
            raise ValueError("scripted_teacher handle needs options.script_path")
        return ScriptedTeacher.from_script_file(script_path)
    if handle.kind == "toy_student":
        return ToyStudentBackend(
            fallback=handle.options.get("fallback", "I do not know how to solve this.")
        )
    raise ValueError(f"unknown backend kind {handle.kind!r}")


def generate(backend, prompt: str, params: GenerationParams | None = None) -> str:
    if isinstance(backend, BackendHandle):
        backend = create_backend(backend)
    return backend.generate(prompt, params)


def batch_generate(
    backend,
    prompts: list[str],
    params: GenerationParams | None = None,
    parallelism: int = 1,
) -> list[GenerationResult]:
    """Generate for every prompt; outputs align index-wise with inputs.

    Per-item failures are recorded in place (``GenerationResult.error``)
    without aborting the batch.  At most ``parallelism`` requests run
    concurrently; ``parallelism=1`` is strictly sequential.
    """
    if isinstance(backend, BackendHandle):
        backend = create_backend(backend)
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def run_one(prompt: str) -> GenerationResult:
        try:
            return GenerationResult(text=backend.generate(prompt, params))
        except Exception as exc:  # noqa: BLE001 - captured per-item by contract
            return GenerationResult(error=f"{type(exc).__name__}: {exc}")

    if parallelism == 1:
        return [run_one(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run_one, prompts))


# ---------------------------------------------------------------------------
# fine-tuning clients


class HttpTrainer:
    """Client for the HTTP trainer contract."""

    kind = "http"

    def __init__(
        self,
        endpoint: str,
        poll_interval: float = 0.25,
        deadline: float = 600.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.poll_interval = poll_interval
        self.deadline = deadline
        self.session = session or requests.Session()

    def fine_tune(self, job: FineTuneJob) -> CheckpointHandle:
        body = {
            "base_checkpoint": job.base.id,
            "dataset_path": str(Path(job.dataset_path).resolve()),
            "epochs": job.epochs,
            "instruction": job.instruction,
            "hyper": job.hyper,
        }
        try:
            resp = self.session.post(self.endpoint + "/finetune", json=body, timeout=60)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TrainerError(f"trainer unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise TrainerError(f"finetune rejected: HTTP {resp.status_code}: {resp.text[:200]}")
        checkpoint_id = resp.json().get("checkpoint_id")
        if not checkpoint_id:
            raise TrainerError(f"trainer reply missing checkpoint_id: {resp.text[:200]}")

        start = time.monotonic()
        while True:
            status = self.session.get(
                self.endpoint + f"/status/{checkpoint_id}", timeout=60
            )
            if status.status_code >= 400:
                raise TrainerError(
                    f"status poll failed: HTTP {status.status_code}: {status.text[:200]}"
                )
            obj = status.json()
            state = obj.get("state")
            if state == "done":
                break
            if state == "failed":
                raise TrainerError(f"fine-tune failed: {obj.get('detail', '')}")
            if state not in ("pending", "running"):
                raise TrainerError(f"unknown trainer state {state!r}")
            if time.monotonic() - start > self.deadline:
                raise TrainerError(f"fine-tune timed out after {self.deadline}s")
            time.sleep(self.poll_interval)

        digest = dataset_digest(job.dataset_path)
        return CheckpointHandle(
            id=checkpoint_id,
            lineage=job.base.lineage + [[len(job.base.lineage) + 1, digest]],
            created_at=_utc_now(),
        )


class SubprocessTrainer:
    """One-shot trainer: payload on stdin, checkpoint id on stdout."""

    kind = "subprocess"

    def __init__(self, command: list[str], timeout: float = 600.0):
        if not command:
            raise ValueError("subprocess trainer needs a non-empty command")
        self.command = list(command)
        self.timeout = timeout

    def fine_tune(self, job: FineTuneJob) -> CheckpointHandle:
        payload = json.dumps(
            {
                "base_checkpoint": job.base.id,
                "dataset_path": str(Path(job.dataset_path).resolve()),
                "epochs": job.epochs,
                "instruction": job.instruction,
                "hyper": job.hyper,
            }
        )
        try:
            proc = subprocess.run(
                self.command,
                input=payload,
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise TrainerError(f"trainer subprocess timed out after {self.timeout}s") from exc
        if proc.returncode != 0:
            raise TrainerError(
                f"trainer subprocess exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
            )
        try:
            reply = json.loads(proc.stdout.strip().splitlines()[-1])
        except (ValueError, IndexError) as exc:
            raise TrainerError(f"bad trainer reply: {proc.stdout[-200:]}") from exc
        if "error" in reply:
            raise TrainerError(f"fine-tune failed: {reply['error']}")
        if "checkpoint_id" not in reply:
            raise TrainerError(f"trainer reply missing checkpoint_id: {reply}")
        digest = dataset_digest(job.dataset_path)
        return CheckpointHandle(
            id=reply["checkpoint_id"],
            lineage=job.base.lineage + [[len(job.base.lineage) + 1, digest]],
            created_at=_utc_now(),
        )


def fine_tune(trainer, job: FineTuneJob) -> CheckpointHandle:
    """Validate the dataset, then hand the job to the trainer.

    The dataset file must exist, be non-empty, and conform to the training
    JSONL schema — enforced here so every trainer kind rejects bad input
    before submission.
    """
    read_training_file(job.dataset_path)
    if job.epochs < 1:
        raise ValueError("epochs must be >= 1")
    return trainer.fine_tune(job)
