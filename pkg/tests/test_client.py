"""Tests for the endpoint client (retries, backoff, concurrency) and the mock."""

from __future__ import annotations

import json
import threading
import time

import pytest

from mmsynth.client import (
    EndpointConfig,
    MllmClient,
    backoff_cap,
    mock_generate,
)
from mmsynth.errors import TransportError
from mmsynth.prompts import build_prompt
from mmsynth.sampling import ALL_TASK_MODALITY_ROWS, ModalityCombination, TaskKind
from mmsynth.validation import parse_generation, validate

from test_images import make_config
from test_prompts import bundle_for, triple_for

M = ModalityCombination


def ok_payload(text="{}"):
    return {"choices": [{"message": {"content": text}}], "usage": {"total_tokens": 5}}


def make_client(transport, max_retries=5, max_concurrency=8, sleeper=lambda s: None):
    endpoint = EndpointConfig(
        base_url="http://example.invalid",
        api_key="k",
        max_retries=max_retries,
        max_concurrency=max_concurrency,
    )
    return MllmClient(endpoint, locate=lambda i: f"http://img/{i}", transport=transport,
                      sleeper=sleeper)


class TestRetries:
    def test_always_429_exhausts_budget(self):
        calls = []

        def transport(body):
            calls.append(1)
            return 429, {}

        client = make_client(transport, max_retries=2)
        with pytest.raises(TransportError) as err:
            client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        assert len(calls) == 3
        assert err.value.attempts == 3
        assert err.value.status == 429

    def test_success_on_second_attempt(self):
        statuses = iter([503, 200])

        def transport(body):
            status = next(statuses)
            return status, ok_payload() if status == 200 else {}

        client = make_client(transport)
        result = client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        assert result.attempt_count == 2
        assert result.usage == {"total_tokens": 5}

    def test_non_retryable_4xx_fails_immediately(self):
        calls = []

        def transport(body):
            calls.append(1)
            return 400, {}

        client = make_client(transport)
        with pytest.raises(TransportError) as err:
            client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        assert len(calls) == 1
        assert err.value.status == 400

    def test_timeout_is_retryable(self):
        state = {"n": 0}

        def transport(body):
            state["n"] += 1
            if state["n"] == 1:
                raise TimeoutError
            return 200, ok_payload()

        client = make_client(transport)
        assert client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T)).attempt_count == 2


class TestBackoff:
    def test_cap_schedule_monotone_and_bounded(self):
        caps = [backoff_cap(a) for a in range(12)]
        assert caps == sorted(caps)
        assert caps[0] == 1.0
        assert all(c <= 30.0 for c in caps)
        assert caps[-1] == 30.0

    def test_sleeps_stay_under_caps(self):
        sleeps = []

        def transport(body):
            return 429, {}

        client = make_client(transport, max_retries=6, sleeper=sleeps.append)
        with pytest.raises(TransportError):
            client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        assert len(sleeps) == 6
        for attempt, slept in enumerate(sleeps):
            assert 0.0 <= slept <= backoff_cap(attempt)


class TestRequestShape:
    def test_three_attachments_anchor_first(self):
        seen = {}

        def transport(body):
            seen.update(body)
            return 200, ok_payload()

        client = make_client(transport)
        client.generate(bundle_for(TaskKind.RETRIEVAL, M.IT_TO_IT))
        content = seen["messages"][0]["content"]
        assert content[0]["type"] == "text"
        images = [part for part in content if part["type"] == "image_url"]
        assert [p["image_url"]["url"] for p in images] == [
            "http://img/imgA", "http://img/imgB", "http://img/imgC",
        ]

    def test_generation_params_forwarded(self):
        seen = {}

        def transport(body):
            seen.update(body)
            return 200, ok_payload()

        make_client(transport).generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        assert seen["temperature"] == 1.0
        assert seen["top_p"] == 1.0
        assert seen["model"] == "gpt-4o-2024-08-06"

    def test_file_locator_becomes_data_url(self, tmp_path):
        img = tmp_path / "a.png"
        img.write_bytes(b"\x89PNG fake")
        seen = {}

        def transport(body):
            seen.update(body)
            return 200, ok_payload()

        endpoint = EndpointConfig(base_url="http://x")
        client = MllmClient(endpoint, locate=lambda i: str(img), transport=transport)
        client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))
        url = seen["messages"][0]["content"][1]["image_url"]["url"]
        assert url.startswith("data:image/png;base64,")

    def test_missing_image_file(self):
        endpoint = EndpointConfig(base_url="http://x")
        client = MllmClient(endpoint, locate=lambda i: "/nope/missing.jpg",
                            transport=lambda b: (200, ok_payload()))
        with pytest.raises(TransportError, match="not found"):
            client.generate(bundle_for(TaskKind.VQA, M.IT_TO_T))


class TestConcurrencyBound:
    def test_in_flight_never_exceeds_limit(self):
        limit = 3
        lock = threading.Lock()
        state = {"now": 0, "peak": 0}

        def transport(body):
            with lock:
                state["now"] += 1
                state["peak"] = max(state["peak"], state["now"])
            time.sleep(0.01)
            with lock:
                state["now"] -= 1
            return 200, ok_payload()

        client = make_client(transport, max_concurrency=limit)
        bundle = bundle_for(TaskKind.VQA, M.IT_TO_T)
        threads = [threading.Thread(target=client.generate, args=(bundle,)) for _ in range(12)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state["peak"] <= limit
        assert state["peak"] >= 2  # parallelism actually happened


class TestMockGenerate:
    def test_deterministic(self):
        config = make_config(TaskKind.RETRIEVAL, M.IT_TO_IT)
        bundle = build_prompt(config, triple_for(M.IT_TO_IT))
        assert mock_generate(bundle, config).raw_text == mock_generate(bundle, config).raw_text

    def test_classification_image_only_empty_input(self):
        config = make_config(TaskKind.CLASSIFICATION, M.I_TO_T)
        bundle = build_prompt(config, triple_for(M.I_TO_T))
        obj = json.loads(mock_generate(bundle, config).raw_text)
        assert obj["input_text"] == ""
        assert obj["revised_input_text"] == ""

    def test_label_never_equals_misleading(self):
        for seed in range(50):
            config = make_config(TaskKind.CLASSIFICATION, M.IT_TO_T, seed=seed)
            bundle = build_prompt(config, triple_for(M.IT_TO_T))
            obj = json.loads(mock_generate(bundle, config).raw_text)
            assert obj["revised_label"] != obj["revised_misleading_label"]

    def test_thousand_mocks_all_validate(self):
        # validator is the oracle: every mocked generation must be accepted
        count = 0
        for seed in range(100):
            for task, modality in ALL_TASK_MODALITY_ROWS:
                config = make_config(task, modality, seed=seed, index=seed)
                bundle = build_prompt(config, triple_for(modality))
                gen = parse_generation(mock_generate(bundle, config).raw_text, task)
                report = validate(gen, config)
                assert report.verdict == "accept", (task, modality, report.violations)
                count += 1
        assert count == 1000
