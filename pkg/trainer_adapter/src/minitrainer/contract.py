"""Wire-contract conformance checking.

``validate_contract`` replays the orchestrator's canonical request sequence
against a live service -- submit a fine-tune, poll its status to a terminal
state, fetch the registered checkpoint, ask the new checkpoint for a
completion -- and checks every response field against the contract.  The
result is a list of human-readable diffs; an empty list means the service
conforms.  A service that never reaches a terminal state produces a diff
carrying the elapsed time rather than hanging forever.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import requests

from .service import JOB_STATES

_TERMINAL = ("done", "failed")


@dataclass
class ConformanceReport:
    """Outcome of one contract replay."""

    endpoint: str
    diffs: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diffs

    def render(self) -> str:
        if self.ok:
            return f"{self.endpoint}: conforms (0 diffs)"
        lines = [f"{self.endpoint}: {len(self.diffs)} diff(s)"]
        lines.extend(f"  - {diff}" for diff in self.diffs)
        return "\n".join(lines)


def _check_json(diffs: list[str], where: str, response) -> dict | None:
    try:
        payload = response.json()
    except ValueError:
        diffs.append(f"{where}: body is not JSON")
        return None
    if not isinstance(payload, dict):
        diffs.append(f"{where}: body is not an object")
        return None
    return payload


def _require_str(diffs: list[str], where: str, payload: dict, key: str) -> str | None:
    if key not in payload:
        diffs.append(f"{where}: missing field '{key}'")
        return None
    value = payload[key]
    if not isinstance(value, str) or not value:
        diffs.append(f"{where}: field '{key}' must be a non-empty string, got {value!r}")
        return None
    return value


def validate_contract(
    endpoint: str,
    dataset_path: str,
    base_checkpoint: str = "tiny-base",
    epochs: int = 1,
    deadline: float = 60.0,
    poll_interval: float = 0.1,
) -> ConformanceReport:
    """Replay submit/poll/fetch/complete against ``endpoint`` and diff it.

    ``dataset_path`` must name a valid training file the service can read;
    the replay really trains, so conformance includes the job finishing.
    """
    report = ConformanceReport(endpoint=endpoint.rstrip("/"))
    diffs = report.diffs
    base = report.endpoint
    session = requests.Session()

    # -- submit ----------------------------------------------------------
    body = {
        "base_checkpoint": base_checkpoint,
        "dataset_path": dataset_path,
        "epochs": epochs,
        "instruction": "Answer the question, showing your reasoning.",
        "hyper": {},
    }
    try:
        resp = session.post(f"{base}/finetune", json=body, timeout=30)
    except requests.RequestException as exc:
        diffs.append(f"finetune: unreachable ({exc})")
        return report
    if resp.status_code != 200:
        diffs.append(f"finetune: expected HTTP 200, got {resp.status_code} ({resp.text[:200]})")
        return report
    payload = _check_json(diffs, "finetune response", resp)
    if payload is None:
        return report
    checkpoint_id = _require_str(diffs, "finetune response", payload, "checkpoint_id")
    if checkpoint_id is None:
        return report

    # -- poll ------------------------------------------------------------
    started = time.monotonic()
    state = None
    detail = ""
    while True:
        try:
            resp = session.get(f"{base}/status/{checkpoint_id}", timeout=30)
        except requests.RequestException as exc:
            diffs.append(f"status: unreachable ({exc})")
            return report
        if resp.status_code != 200:
            diffs.append(f"status: expected HTTP 200, got {resp.status_code}")
            return report
        payload = _check_json(diffs, "status response", resp)
        if payload is None:
            return report
        state = _require_str(diffs, "status response", payload, "state")
        if state is None:
            return report
        if state not in JOB_STATES:
            diffs.append(f"status response: field 'state' has unknown value '{state}'")
            return report
        if "detail" not in payload or not isinstance(payload["detail"], str):
            diffs.append("status response: missing string field 'detail'")
            return report
        detail = payload["detail"]
        if state in _TERMINAL:
            break
        elapsed = time.monotonic() - started
        if elapsed > deadline:
            diffs.append(
                f"status: no terminal state within {elapsed:.1f}s (last state '{state}')"
            )
            return report
        time.sleep(poll_interval)
    if state == "failed":
        diffs.append(f"job failed instead of completing: {detail}")
        return report

    # -- unknown ids must not resolve ------------------------------------
    try:
        resp = session.get(f"{base}/status/no-such-job-0000", timeout=30)
    except requests.RequestException as exc:
        diffs.append(f"status (unknown id): unreachable ({exc})")
        return report
    if resp.status_code < 400:
        diffs.append(
            f"status for unknown id: expected a not-found reply, got HTTP {resp.status_code}"
        )

    # -- fetch -----------------------------------------------------------
    try:
        resp = session.get(f"{base}/checkpoints/{checkpoint_id}", timeout=30)
    except requests.RequestException as exc:
        diffs.append(f"checkpoint fetch: unreachable ({exc})")
        return report
    if resp.status_code != 200:
        diffs.append(f"checkpoint fetch: expected HTTP 200, got {resp.status_code}")
    else:
        meta = _check_json(diffs, "checkpoint metadata", resp)
        if meta is not None:
            fetched = _require_str(diffs, "checkpoint metadata", meta, "checkpoint_id")
            if fetched is not None and fetched != checkpoint_id:
                diffs.append(
                    "checkpoint metadata: field 'checkpoint_id' is "
                    f"'{fetched}', expected '{checkpoint_id}'"
                )
            if not isinstance(meta.get("lineage"), list):
                diffs.append("checkpoint metadata: missing list field 'lineage'")
            curve = meta.get("loss_curve")
            if not isinstance(curve, list) or not all(
                isinstance(v, (int, float)) for v in curve
            ):
                diffs.append("checkpoint metadata: missing numeric list field 'loss_curve'")
            else:
                if len(curve) != epochs + 1:
                    diffs.append(
                        f"checkpoint metadata: loss_curve has {len(curve)} entries, "
                        f"expected {epochs + 1} (initial loss plus one per epoch)"
                    )
                for i in range(1, len(curve)):
                    if curve[i] > curve[i - 1] + 1e-9:
                        diffs.append(
                            f"checkpoint metadata: loss_curve increases between "
                            f"epochs {i - 1} and {i} ({curve[i - 1]:.6f} -> {curve[i]:.6f})"
                        )

    # -- completion ------------------------------------------------------
    body = {
        "model": checkpoint_id,
        "prompt": "### question:\nWhat is 1 + 1?",
        "temperature": 0.0,
        "max_tokens": 256,
    }
    try:
        resp = session.post(f"{base}/completions", json=body, timeout=30)
    except requests.RequestException as exc:
        diffs.append(f"completions: unreachable ({exc})")
        return report
    if resp.status_code != 200:
        diffs.append(f"completions: expected HTTP 200, got {resp.status_code}")
        return report
    payload = _check_json(diffs, "completions response", resp)
    if payload is None:
        return report
    choices = payload.get("choices")
    if not isinstance(choices, list) or not choices:
        diffs.append("completions response: missing non-empty list field 'choices'")
        return report
    first = choices[0]
    if not isinstance(first, dict) or not isinstance(first.get("text"), str):
        diffs.append("completions response: choices[0] has no string field 'text'")
    return report
