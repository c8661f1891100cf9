"""minitrainer: a tiny real fine-tuning service behind a poll-based HTTP contract."""

from .contract import ConformanceReport, validate_contract
from .model import TinyLM, featurize, fine_tune
from .registry import (
    UnknownCheckpointError,
    checkpoint_dir,
    checkpoint_exists,
    dataset_digest,
    init_model_root,
    list_checkpoints,
    load_checkpoint,
    register_checkpoint,
)
from .service import (
    AdapterService,
    DatasetError,
    JobError,
    RequestError,
    TrainerJobRecord,
    build_server,
    execute_job,
    extract_question,
    normalize_request,
    read_dataset,
    serve,
)

__all__ = [
    "AdapterService",
    "ConformanceReport",
    "DatasetError",
    "JobError",
    "RequestError",
    "TinyLM",
    "TrainerJobRecord",
    "UnknownCheckpointError",
    "build_server",
    "checkpoint_dir",
    "checkpoint_exists",
    "dataset_digest",
    "execute_job",
    "extract_question",
    "featurize",
    "fine_tune",
    "init_model_root",
    "list_checkpoints",
    "load_checkpoint",
    "normalize_request",
    "read_dataset",
    "register_checkpoint",
    "serve",
    "validate_contract",
]
