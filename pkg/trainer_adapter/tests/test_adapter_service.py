"""End-to-end exercises of the HTTP service over a real socket."""

import json
import time

import pytest
import requests

from minitrainer import checkpoint_dir, checkpoint_exists, extract_question

INSTRUCTION = "Answer the question, showing your reasoning."


def _submit(base_url, dataset, base="tiny-base", epochs=2, hyper=None, instruction=INSTRUCTION):
    body = {
        "base_checkpoint": base,
        "dataset_path": str(dataset),
        "epochs": epochs,
        "instruction": instruction,
        "hyper": hyper or {},
    }
    return requests.post(f"{base_url}/finetune", json=body, timeout=10)


def _poll(base_url, job_id, timeout=30.0):
    deadline = time.monotonic() + timeout
    while True:
        reply = requests.get(f"{base_url}/status/{job_id}", timeout=10)
        assert reply.status_code == 200, reply.text
        payload = reply.json()
        if payload["state"] in ("done", "failed"):
            return payload
        assert time.monotonic() < deadline, f"job stuck in state {payload['state']}"
        time.sleep(0.02)


class TestFineTuneEndpoint:
    def test_happy_path_registers_a_checkpoint(self, live_service, make_dataset):
        base_url, model_root = live_service
        dataset = make_dataset(n=10)
        reply = _submit(base_url, dataset, epochs=3)
        assert reply.status_code == 200
        job_id = reply.json()["checkpoint_id"]
        assert job_id.startswith("ft-")

        status = _poll(base_url, job_id)
        assert status["state"] == "done"
        assert "trained 3 epoch(s)" in status["detail"]
        assert checkpoint_exists(model_root, job_id)

        meta = requests.get(f"{base_url}/checkpoints/{job_id}", timeout=10).json()
        assert meta["checkpoint_id"] == job_id
        assert meta["base_checkpoint"] == "tiny-base"
        curve = meta["loss_curve"]
        assert len(curve) == 4  # initial loss plus one entry per epoch
        assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))
        assert len(meta["lineage"]) == 1
        assert meta["lineage"][0]["dataset_digest"] == meta["dataset_digest"]

    def test_base_checkpoint_files_never_change(self, live_service, make_dataset):
        base_url, model_root = live_service
        base_files = sorted(checkpoint_dir(model_root, "tiny-base").iterdir())
        before = [(p.name, p.read_bytes()) for p in base_files]
        job_id = _submit(base_url, make_dataset()).json()["checkpoint_id"]
        assert _poll(base_url, job_id)["state"] == "done"
        after = [(p.name, p.read_bytes()) for p in sorted(checkpoint_dir(model_root, "tiny-base").iterdir())]
        assert after == before

    def test_identical_jobs_share_one_checkpoint(self, live_service, make_dataset):
        base_url, _ = live_service
        dataset = make_dataset(n=4)
        first = _submit(base_url, dataset).json()["checkpoint_id"]
        assert _poll(base_url, first)["state"] == "done"
        second = _submit(base_url, dataset).json()["checkpoint_id"]
        assert second == first
        assert _poll(base_url, second)["state"] == "done"

    def test_chained_fine_tunes_extend_lineage(self, live_service, make_dataset):
        base_url, _ = live_service
        first = _submit(base_url, make_dataset(n=4)).json()["checkpoint_id"]
        assert _poll(base_url, first)["state"] == "done"
        second = _submit(base_url, make_dataset(n=6), base=first).json()["checkpoint_id"]
        assert _poll(base_url, second)["state"] == "done"
        meta = requests.get(f"{base_url}/checkpoints/{second}", timeout=10).json()
        assert len(meta["lineage"]) == 2
        assert meta["lineage"][1]["base"] == first

    @pytest.mark.parametrize(
        "mangle, fragment",
        [
            (lambda b: b.pop("base_checkpoint"), "base_checkpoint"),
            (lambda b: b.pop("instruction"), "instruction"),
            (lambda b: b.update(epochs=0), "epochs"),
            (lambda b: b.update(epochs="three"), "epochs"),
            (lambda b: b.update(base_checkpoint=""), "base_checkpoint"),
            (lambda b: b.update(hyper={"momentum": 0.9}), "unknown hyper key"),
            (lambda b: b.update(hyper={"learning_rate": -1}), "positive"),
            (lambda b: b.update(hyper=[1, 2]), "hyper"),
        ],
    )
    def test_schema_violations_are_rejected_up_front(
        self, live_service, make_dataset, mangle, fragment
    ):
        base_url, _ = live_service
        body = {
            "base_checkpoint": "tiny-base",
            "dataset_path": str(make_dataset(n=2)),
            "epochs": 1,
            "instruction": INSTRUCTION,
            "hyper": {},
        }
        mangle(body)
        reply = requests.post(f"{base_url}/finetune", json=body, timeout=10)
        assert reply.status_code == 400
        assert fragment in reply.json()["error"]

    def test_missing_dataset_file_is_a_400(self, live_service, tmp_path):
        base_url, _ = live_service
        reply = _submit(base_url, tmp_path / "nope.jsonl")
        assert reply.status_code == 400
        assert "not readable" in reply.json()["error"]

    def test_non_json_body_is_a_400(self, live_service):
        base_url, _ = live_service
        reply = requests.post(
            f"{base_url}/finetune",
            data=b"not json",
            headers={"Content-Type": "application/json"},
            timeout=10,
        )
        assert reply.status_code == 400

    def test_array_body_is_a_400(self, live_service):
        base_url, _ = live_service
        reply = requests.post(f"{base_url}/finetune", json=[1, 2], timeout=10)
        assert reply.status_code == 400
        assert "object" in reply.json()["error"]


class TestJobFailures:
    def test_malformed_dataset_line_fails_the_job_naming_the_line(
        self, live_service, make_dataset
    ):
        base_url, _ = live_service
        rows = [
            {"question": "What is 1 + 1?", "rationale": "Final Answer: 2", "instruction": INSTRUCTION},
            {"question": "What is 2 + 2?", "instruction": INSTRUCTION},  # no rationale
        ]
        job_id = _submit(base_url, make_dataset(rows=rows)).json()["checkpoint_id"]
        status = _poll(base_url, job_id)
        assert status["state"] == "failed"
        assert "line 2" in status["detail"]
        assert "rationale" in status["detail"]

    def test_unparsable_dataset_line_fails_the_job(self, live_service, tmp_path):
        base_url, _ = live_service
        path = tmp_path / "broken.jsonl"
        path.write_text(
            '{"question": "q", "rationale": "r", "instruction": "i"}\n{oops\n',
            encoding="utf-8",
        )
        job_id = _submit(base_url, path).json()["checkpoint_id"]
        status = _poll(base_url, job_id)
        assert status["state"] == "failed"
        assert "line 2" in status["detail"]

    def test_unloadable_base_checkpoint_fails_the_job(self, live_service, make_dataset):
        base_url, _ = live_service
        job_id = _submit(base_url, make_dataset(n=2), base="ghost-model").json()[
            "checkpoint_id"
        ]
        status = _poll(base_url, job_id)
        assert status["state"] == "failed"
        assert "ghost-model" in status["detail"]
        assert "not loadable" in status["detail"]

    def test_failed_jobs_do_not_register_checkpoints(self, live_service, make_dataset):
        base_url, model_root = live_service
        job_id = _submit(base_url, make_dataset(n=2), base="ghost-model").json()[
            "checkpoint_id"
        ]
        assert _poll(base_url, job_id)["state"] == "failed"
        assert not checkpoint_exists(model_root, job_id)
        reply = requests.get(f"{base_url}/checkpoints/{job_id}", timeout=10)
        assert reply.status_code == 404


class TestStatusEndpoint:
    def test_unknown_job_is_a_404(self, live_service):
        base_url, _ = live_service
        reply = requests.get(f"{base_url}/status/ft-never-heard-of-it", timeout=10)
        assert reply.status_code == 404
        assert "unknown job" in reply.json()["error"]

    def test_registered_checkpoint_reports_done_without_a_live_record(
        self, live_service, make_dataset, model_root
    ):
        import threading

        from minitrainer import build_server

        base_url, _ = live_service
        job_id = _submit(base_url, make_dataset(n=3)).json()["checkpoint_id"]
        assert _poll(base_url, job_id)["state"] == "done"

        # a second service over the same model root never saw the job run
        other = build_server("127.0.0.1", 0, model_root)
        thread = threading.Thread(target=other.serve_forever, daemon=True)
        thread.start()
        try:
            port = other.server_address[1]
            reply = requests.get(f"http://127.0.0.1:{port}/status/{job_id}", timeout=10)
            assert reply.status_code == 200
            assert reply.json()["state"] == "done"
        finally:
            other.shutdown()
            other.service.close()
            thread.join(timeout=5)

    def test_jobs_queue_behind_one_worker_and_states_stay_ordered(
        self, live_service, make_dataset
    ):
        base_url, _ = live_service
        rank = {"pending": 0, "running": 1, "done": 2, "failed": 2}
        # heavier jobs widen the window in which the queue is observable
        ids = [
            _submit(base_url, make_dataset(n=12), epochs=150 + i).json()["checkpoint_id"]
            for i in range(3)
        ]
        assert len(set(ids)) == 3
        observed = {job_id: [] for job_id in ids}
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            states = {}
            for job_id in ids:
                payload = requests.get(f"{base_url}/status/{job_id}", timeout=10).json()
                states[job_id] = payload["state"]
                history = observed[job_id]
                if not history or history[-1] != payload["state"]:
                    history.append(payload["state"])
            assert sum(state == "running" for state in states.values()) <= 1
            if all(state == "done" for state in states.values()):
                break
            time.sleep(0.01)
        for job_id, history in observed.items():
            assert history[-1] == "done"
            ranks = [rank[state] for state in history]
            assert ranks == sorted(ranks), f"state regressed for {job_id}: {history}"


class TestCompletions:
    def _train(self, base_url, make_dataset, n=6):
        dataset = make_dataset(n=n)
        rows = [json.loads(line) for line in dataset.read_text().splitlines()]
        job_id = _submit(base_url, dataset, epochs=4).json()["checkpoint_id"]
        assert _poll(base_url, job_id)["state"] == "done"
        return job_id, rows

    def test_trained_checkpoint_answers_its_questions(self, live_service, make_dataset):
        base_url, _ = live_service
        job_id, rows = self._train(base_url, make_dataset)
        for row in rows:
            prompt = f"{INSTRUCTION}\n\n### question:\n{row['question']}\n"
            reply = requests.post(
                f"{base_url}/v1/completions",
                json={"model": job_id, "prompt": prompt, "temperature": 0.0, "max_tokens": 512},
                timeout=10,
            )
            assert reply.status_code == 200
            assert reply.json()["choices"][0]["text"] == row["rationale"]

    def test_exemplar_blocks_do_not_distract_the_model(self, live_service, make_dataset):
        base_url, _ = live_service
        job_id, rows = self._train(base_url, make_dataset)
        target = rows[2]
        prompt = (
            f"{INSTRUCTION}\n\n"
            "### question:\nA decoy question about trains.\n"
            "### teacher answer:\nSomething.\n"
            "### student answer:\nSomething else.\n"
            "### score:\n0\n\n"
            f"### question:\n{target['question']}\n"
        )
        reply = requests.post(
            f"{base_url}/completions",
            json={"model": job_id, "prompt": prompt},
            timeout=10,
        )
        assert reply.json()["choices"][0]["text"] == target["rationale"]

    def test_chat_mode_mirrors_completions(self, live_service, make_dataset):
        base_url, _ = live_service
        job_id, rows = self._train(base_url, make_dataset)
        target = rows[0]
        prompt = f"{INSTRUCTION}\n\n### question:\n{target['question']}\n"
        reply = requests.post(
            f"{base_url}/v1/chat/completions",
            json={"model": job_id, "messages": [{"role": "user", "content": prompt}]},
            timeout=10,
        )
        assert reply.status_code == 200
        message = reply.json()["choices"][0]["message"]
        assert message["role"] == "assistant"
        assert message["content"] == target["rationale"]

    def test_unknown_model_is_a_404(self, live_service):
        base_url, _ = live_service
        reply = requests.post(
            f"{base_url}/v1/completions",
            json={"model": "ft-ghost", "prompt": "### question:\nhi\n"},
            timeout=10,
        )
        assert reply.status_code == 404
        assert "unknown model" in reply.json()["error"]["message"]

    def test_oversized_prompt_reports_a_context_overflow(self, live_service):
        base_url, _ = live_service
        reply = requests.post(
            f"{base_url}/v1/completions",
            json={"model": "tiny-base", "prompt": "x" * 40000},
            timeout=10,
        )
        assert reply.status_code == 400
        assert reply.json()["error"]["code"] == "context_length_exceeded"

    def test_missing_prompt_is_a_400(self, live_service):
        base_url, _ = live_service
        reply = requests.post(
            f"{base_url}/v1/completions", json={"model": "tiny-base"}, timeout=10
        )
        assert reply.status_code == 400


class TestRouting:
    def test_unknown_paths_are_404(self, live_service):
        base_url, _ = live_service
        assert requests.get(f"{base_url}/nope", timeout=10).status_code == 404
        assert requests.post(f"{base_url}/nope", json={}, timeout=10).status_code == 404

    def test_health_endpoint(self, live_service):
        base_url, _ = live_service
        reply = requests.get(f"{base_url}/healthz", timeout=10)
        assert reply.status_code == 200
        assert reply.json() == {"ok": True}


class TestQuestionExtraction:
    def test_takes_the_last_question_block(self):
        prompt = "intro\n### question:\nfirst?\n### score:\n1\n\n### question:\nsecond?\n"
        assert extract_question(prompt) == "second?"

    def test_stops_at_the_next_section(self):
        prompt = "### question:\nthe target?\n### teacher answer:\nspoiler\n"
        assert extract_question(prompt) == "the target?"

    def test_markerless_prompt_is_the_question(self):
        assert extract_question("  plain question  ") == "plain question"
