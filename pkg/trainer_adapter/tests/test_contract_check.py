"""The conformance replay: zero diffs against the real service, named
field-level diffs against deliberately broken stand-ins."""

import contextlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from minitrainer import validate_contract


@contextlib.contextmanager
def _stub(post_routes, get_routes):
    """Serve canned JSON replies; route values are (status, payload) or
    callables taking the path."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self, routes):
            for prefix, outcome in routes.items():
                if self.path.startswith(prefix):
                    status, payload = outcome(self.path) if callable(outcome) else outcome
                    body = json.dumps(payload).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
            self.send_response(404)
            self.end_headers()

        def do_POST(self):
            self.rfile.read(int(self.headers.get("Content-Length") or 0))
            self._reply(post_routes)

        def do_GET(self):
            self._reply(get_routes)

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join(timeout=5)


_GOOD_META = {
    "checkpoint_id": "j1",
    "base_checkpoint": "tiny-base",
    "lineage": [{"base": "tiny-base", "dataset_digest": "d", "epochs": 1}],
    "loss_curve": [1.0, 0.5],
}
_GOOD_COMPLETION = {"choices": [{"index": 0, "text": "an answer"}]}


def test_real_service_conforms_with_zero_diffs(live_service, make_dataset):
    base_url, _ = live_service
    report = validate_contract(base_url, str(make_dataset(n=4)))
    assert report.diffs == []
    assert report.ok
    assert "conforms (0 diffs)" in report.render()


def test_unreadable_dataset_surfaces_as_a_submit_diff(live_service, tmp_path):
    base_url, _ = live_service
    report = validate_contract(base_url, str(tmp_path / "missing.jsonl"))
    assert not report.ok
    assert any("finetune" in diff and "400" in diff for diff in report.diffs)


def test_unreachable_endpoint_is_reported(make_dataset):
    report = validate_contract(
        "http://127.0.0.1:9", str(make_dataset(n=2)), deadline=1.0
    )
    assert len(report.diffs) == 1
    assert "unreachable" in report.diffs[0]


def test_missing_checkpoint_id_field_is_named(make_dataset):
    with _stub({"/finetune": (200, {"id": "j1"})}, {}) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert any("missing field 'checkpoint_id'" in diff for diff in report.diffs)


def test_unknown_state_value_is_named(make_dataset):
    with _stub(
        {"/finetune": (200, {"checkpoint_id": "j1"})},
        {"/status/": (200, {"state": "meditating", "detail": ""})},
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert any("unknown value 'meditating'" in diff for diff in report.diffs)


def test_missing_detail_field_is_named(make_dataset):
    with _stub(
        {"/finetune": (200, {"checkpoint_id": "j1"})},
        {"/status/": (200, {"state": "done"})},
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert any("missing string field 'detail'" in diff for diff in report.diffs)


def test_never_terminal_produces_a_timing_diff(make_dataset):
    with _stub(
        {"/finetune": (200, {"checkpoint_id": "j1"})},
        {"/status/": (200, {"state": "pending", "detail": "queued"})},
    ) as url:
        report = validate_contract(
            url, str(make_dataset(n=2)), deadline=0.3, poll_interval=0.05
        )
    assert len(report.diffs) == 1
    diff = report.diffs[0]
    assert "no terminal state within" in diff
    assert "last state 'pending'" in diff


def test_failed_job_is_a_diff_with_its_detail(make_dataset):
    with _stub(
        {"/finetune": (200, {"checkpoint_id": "j1"})},
        {"/status/": (200, {"state": "failed", "detail": "the dog ate it"})},
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert any("the dog ate it" in diff for diff in report.diffs)


def test_resolving_unknown_ids_is_a_diff(make_dataset):
    # this stub happily reports every id as done, including the probe id
    with _stub(
        {
            "/finetune": (200, {"checkpoint_id": "j1"}),
            "/completions": (200, _GOOD_COMPLETION),
        },
        {
            "/status/": (200, {"state": "done", "detail": "registered"}),
            "/checkpoints/": (200, _GOOD_META),
        },
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert len(report.diffs) == 1
    assert "expected a not-found reply" in report.diffs[0]


def test_increasing_loss_curve_is_a_diff(make_dataset):
    meta = dict(_GOOD_META, loss_curve=[0.5, 0.9])
    with _stub(
        {
            "/finetune": (200, {"checkpoint_id": "j1"}),
            "/completions": (200, _GOOD_COMPLETION),
        },
        {
            "/status/": lambda path: (
                (404, {"error": "unknown"})
                if "no-such-job" in path
                else (200, {"state": "done", "detail": "ok"})
            ),
            "/checkpoints/": (200, meta),
        },
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert len(report.diffs) == 1
    assert "loss_curve increases" in report.diffs[0]


def test_malformed_completion_choice_is_a_diff(make_dataset):
    with _stub(
        {
            "/finetune": (200, {"checkpoint_id": "j1"}),
            "/completions": (200, {"choices": [{"message": "wrong shape"}]}),
        },
        {
            "/status/": lambda path: (
                (404, {"error": "unknown"})
                if "no-such-job" in path
                else (200, {"state": "done", "detail": "ok"})
            ),
            "/checkpoints/": (200, _GOOD_META),
        },
    ) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    assert len(report.diffs) == 1
    assert "choices[0]" in report.diffs[0]


def test_render_lists_each_diff(make_dataset):
    with _stub({"/finetune": (200, {"id": "x"})}, {}) as url:
        report = validate_contract(url, str(make_dataset(n=2)))
    rendered = report.render()
    assert "diff(s)" in rendered
    for diff in report.diffs:
        assert diff in rendered
