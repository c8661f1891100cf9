"""Command line front end.

``minitrainer init`` seeds a model root with the untrained base checkpoint,
``serve`` runs the HTTP service, ``train-once`` executes a single job read
as JSON from stdin (the subprocess flavour of the trainer contract: the
last stdout line is ``{"checkpoint_id": ...}`` on success or
``{"error": ...}`` on failure), and ``check`` runs the conformance replay
against a live endpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .contract import validate_contract
from .registry import init_model_root
from .service import JobError, RequestError, execute_job, normalize_request, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minitrainer",
        description="Tiny fine-tuning service speaking the poll-based trainer contract.",
    )
    sub = parser.add_subparsers(dest="command")

    p_init = sub.add_parser("init", help="create a model root with a base checkpoint")
    p_init.add_argument("--model-root", required=True, type=Path)
    p_init.add_argument("--base-id", default="tiny-base")
    p_init.add_argument("--dim", type=int, default=512)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--model-root", required=True, type=Path)
    p_serve.add_argument("--bind", default="127.0.0.1:8071", help="host:port")
    p_serve.add_argument("--context-chars", type=int, default=32768)

    p_once = sub.add_parser(
        "train-once", help="run one job from stdin JSON and print the checkpoint id"
    )
    p_once.add_argument("--model-root", required=True, type=Path)

    p_check = sub.add_parser("check", help="replay the contract against an endpoint")
    p_check.add_argument("--endpoint", required=True)
    p_check.add_argument("--dataset", required=True)
    p_check.add_argument("--base", default="tiny-base")
    p_check.add_argument("--deadline", type=float, default=60.0)
    return parser


def _cmd_train_once(model_root: Path) -> int:
    try:
        payload = json.load(sys.stdin)
    except ValueError as exc:
        print(json.dumps({"error": f"stdin is not valid JSON: {exc}"}))
        return 1
    try:
        request = normalize_request(payload)
        checkpoint_id, _ = execute_job(model_root, request)
    except (RequestError, JobError) as exc:
        print(json.dumps({"error": str(exc)}))
        return 1
    print(json.dumps({"checkpoint_id": checkpoint_id}))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "init":
        base_id = init_model_root(args.model_root, base_id=args.base_id, dim=args.dim)
        print(f"model root {args.model_root} ready with base checkpoint '{base_id}'")
        return 0
    if args.command == "serve":
        init_model_root(args.model_root)
        print(f"serving {args.model_root} on {args.bind}", file=sys.stderr)
        serve(args.bind, args.model_root, context_chars=args.context_chars)
        return 0
    if args.command == "train-once":
        return _cmd_train_once(args.model_root)
    if args.command == "check":
        report = validate_contract(
            args.endpoint, args.dataset, base_checkpoint=args.base, deadline=args.deadline
        )
        print(report.render())
        return 0 if report.ok else 1
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
