"""Content-addressed checkpoint store.

Layout under a model root::

    <model_root>/checkpoints/<checkpoint_id>/model.json
    <model_root>/checkpoints/<checkpoint_id>/meta.json

A checkpoint id is a digest of everything that determines the trained
weights (base id, dataset bytes, epochs, instruction, hyperparameters), so
re-running an identical job lands on the same id and registration is
idempotent.  Writes go to a staging directory that is renamed into place,
and nothing ever writes inside an existing checkpoint directory -- in
particular the base checkpoint is read-only as far as this module is
concerned.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from pathlib import Path

from .model import TinyLM

MODEL_FILE = "model.json"
META_FILE = "meta.json"


class UnknownCheckpointError(KeyError):
    """Raised when a checkpoint id has no directory under the model root."""


def checkpoint_dir(model_root: Path, checkpoint_id: str) -> Path:
    return Path(model_root) / "checkpoints" / checkpoint_id


def checkpoint_exists(model_root: Path, checkpoint_id: str) -> bool:
    return (checkpoint_dir(model_root, checkpoint_id) / META_FILE).is_file()


def dataset_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def checkpoint_id_for(
    base_id: str, data_digest: str, epochs: int, instruction: str, hyper: dict
) -> str:
    payload = json.dumps(
        {
            "base": base_id,
            "dataset": data_digest,
            "epochs": epochs,
            "instruction": instruction,
            "hyper": hyper,
        },
        sort_keys=True,
    )
    return "ft-" + hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def init_model_root(model_root: Path, base_id: str = "tiny-base", dim: int = 512) -> str:
    """Create ``model_root`` with an untrained base checkpoint.

    Idempotent: if the base checkpoint already exists it is left alone.
    Returns the base checkpoint id.
    """
    root = Path(model_root)
    if checkpoint_exists(root, base_id):
        return base_id
    meta = {
        "checkpoint_id": base_id,
        "base_checkpoint": None,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "epochs": 0,
        "instruction": "",
        "dataset_digest": None,
        "loss_curve": [],
        "lineage": [],
    }
    register_checkpoint(root, base_id, TinyLM.blank(dim=dim), meta)
    return base_id


def load_checkpoint(model_root: Path, checkpoint_id: str) -> tuple[TinyLM, dict]:
    """Load a checkpoint's model and metadata.

    Raises :class:`UnknownCheckpointError` when the id is not registered.
    """
    directory = checkpoint_dir(model_root, checkpoint_id)
    model_path = directory / MODEL_FILE
    meta_path = directory / META_FILE
    if not model_path.is_file() or not meta_path.is_file():
        raise UnknownCheckpointError(checkpoint_id)
    model = TinyLM.from_json_obj(json.loads(model_path.read_text(encoding="utf-8")))
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return model, meta


def register_checkpoint(
    model_root: Path, checkpoint_id: str, model: TinyLM, meta: dict
) -> Path:
    """Write a checkpoint directory, atomically and at most once.

    If the id is already registered the existing directory wins -- the id is
    content-addressed, so the bytes would be identical anyway.
    """
    final = checkpoint_dir(model_root, checkpoint_id)
    if checkpoint_exists(model_root, checkpoint_id):
        return final
    final.parent.mkdir(parents=True, exist_ok=True)
    staging = final.parent / f".staging-{checkpoint_id}-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    (staging / MODEL_FILE).write_text(
        json.dumps(model.to_json_obj(), sort_keys=True) + "\n", encoding="utf-8"
    )
    (staging / META_FILE).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    try:
        os.rename(staging, final)
    except OSError:
        # Lost a race with another writer of the same id; theirs is equivalent.
        shutil.rmtree(staging, ignore_errors=True)
        if not checkpoint_exists(model_root, checkpoint_id):
            raise
    return final


def list_checkpoints(model_root: Path) -> list[str]:
    base = Path(model_root) / "checkpoints"
    if not base.is_dir():
        return []
    return sorted(
        entry.name
        for entry in base.iterdir()
        if entry.is_dir() and (entry / META_FILE).is_file()
    )
