"""Chat-completions-style multimodal endpoint client and its offline mock.

The real client sends one request per prompt bundle (text plus ordered image
parts), retries transient failures with capped exponential backoff and full
jitter, and bounds in-flight requests with a semaphore. The mock emits
deterministic, schema-valid generations keyed by (prompt digest, config seed)
so the whole pipeline runs offline and reproducibly.
"""

from __future__ import annotations

import base64
import json
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import TransportError
from .prompts import PromptBundle
from .sampling import SynthesisConfig, TaskKind
from .util import derive_seed, text_digest

BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_CAP_S = 30.0

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model_name: str = "gpt-4o-2024-08-06"
    max_concurrency: int = 8
    max_retries: int = 5
    request_timeout: float = 120.0

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ValueError(f"max_concurrency must be >= 1, got {self.max_concurrency}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.request_timeout <= 0:
            raise ValueError(f"request_timeout must be > 0, got {self.request_timeout}")


@dataclass
class GenerationResult:
    raw_text: str
    latency: float
    attempt_count: int
    usage: dict | None = None

    def __post_init__(self):
        if self.attempt_count < 1:
            raise ValueError("attempt_count must be >= 1")


# A transport takes the JSON request body and returns (status, response body).
Transport = Callable[[dict], tuple[int, dict]]


def backoff_cap(attempt: int) -> float:
    """Upper bound of the jittered sleep before retry `attempt` (0-based)."""
    return min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR**attempt)


class MllmClient:
    """Thread-safe client; share one instance across workers."""

    def __init__(
        self,
        endpoint: EndpointConfig,
        locate: Callable[[str], str] | None = None,
        transport: Transport | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.locate = locate
        self._transport = transport or self._http_transport
        self._sleeper = sleeper
        self._slots = threading.BoundedSemaphore(endpoint.max_concurrency)
        self._jitter = random.Random()

    def generate(self, bundle: PromptBundle) -> GenerationResult:
        """Execute one bundle; retries 429/5xx/timeouts, fails fast on other 4xx."""
        body = self._request_body(bundle)
        start = time.monotonic()
        last_status: int | None = None
        attempts = 0
        for attempt in range(self.endpoint.max_retries + 1):
            attempts = attempt + 1
            try:
                with self._slots:
                    status, payload = self._transport(body)
            except TimeoutError:
                status, payload = None, None
            if status == 200:
                return GenerationResult(
                    raw_text=_extract_text(payload),
                    latency=time.monotonic() - start,
                    attempt_count=attempts,
                    usage=payload.get("usage") if isinstance(payload, dict) else None,
                )
            last_status = status
            retryable = status is None or status in RETRYABLE_STATUSES
            if not retryable:
                raise TransportError(
                    f"endpoint returned non-retryable status {status}",
                    status=status,
                    attempts=attempts,
                )
            if attempt < self.endpoint.max_retries:
                self._sleeper(self._jitter.uniform(0.0, backoff_cap(attempt)))
        raise TransportError(
            f"retry budget exhausted after {attempts} attempts (last status {last_status})",
            status=last_status,
            attempts=attempts,
        )

    def _request_body(self, bundle: PromptBundle) -> dict:
        content: list[dict] = [{"type": "text", "text": bundle.text}]
        for image_id in bundle.attachments:
            content.append({"type": "image_url", "image_url": {"url": self._image_url(image_id)}})
        return {
            "model": self.endpoint.model_name,
            "temperature": bundle.generation_params["temperature"],
            "top_p": bundle.generation_params["top_p"],
            "messages": [{"role": "user", "content": content}],
        }

    def _image_url(self, image_id: str) -> str:
        if self.locate is None:
            raise TransportError(f"no image locator configured, cannot resolve {image_id!r}")
        locator = self.locate(image_id)
        if locator.startswith(("http://", "https://")):
            return locator
        path = Path(locator)
        if not path.exists():
            raise TransportError(f"image file not found for {image_id!r}: {locator}")
        encoded = base64.b64encode(path.read_bytes()).decode("ascii")
        suffix = path.suffix.lstrip(".").lower() or "jpeg"
        return f"data:image/{suffix};base64,{encoded}"

    def _http_transport(self, body: dict) -> tuple[int, dict]:
        import httpx

        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        try:
            resp = httpx.post(url, json=body, headers=headers, timeout=self.endpoint.request_timeout)
        except httpx.TimeoutException:
            raise TimeoutError from None
        try:
            payload = resp.json()
        except ValueError:
            payload = {}
        return resp.status_code, payload


def _extract_text(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError(f"response carries no assistant text: {payload!r}") from None


# --- deterministic offline mock ---------------------------------------------

_TOPICS = (
    "lighthouse", "orchard", "violin", "glacier", "market stall", "stone bridge",
    "pottery workshop", "meadow", "harbor", "observatory", "street mural", "canyon trail",
)
_QUALITIES = (
    "weathered", "sunlit", "crowded", "quiet", "ancient", "restored",
    "misty", "colorful", "abandoned", "bustling",
)


def _sentence(rng: random.Random, lead: str) -> str:
    return f"{lead} the {rng.choice(_QUALITIES)} {rng.choice(_TOPICS)}."


def _description(rng: random.Random) -> str:
    return (
        f"General Description: {_sentence(rng, 'A wide view of')} "
        f"Object-Level Details: {_sentence(rng, 'In the foreground stands')} "
        f"Contextual Features: {_sentence(rng, 'Soft light falls across')} "
        f"Task-specific Brainstorming: {_sentence(rng, 'Captions could reference')}"
    )


def mock_generate(bundle: PromptBundle, config: SynthesisConfig) -> GenerationResult:
    """Deterministic stand-in for the remote generator.

    Output is a schema-valid JSON object for the config's task whose empty
    fields match the modality combination exactly.
    """
    rng = random.Random(derive_seed(text_digest(bundle.text), config.seed, "mock"))
    task = config.task
    if task is TaskKind.CLASSIFICATION:
        obj = _mock_classification(rng, config)
    elif task is TaskKind.VQA:
        obj = _mock_vqa(rng)
    else:
        obj = _mock_retrieval(rng, config)
    return GenerationResult(
        raw_text=json.dumps(obj, ensure_ascii=False),
        latency=0.0,
        attempt_count=1,
    )


def _two_distinct(rng: random.Random, options: tuple[str, ...]) -> tuple[str, str]:
    first, second = rng.sample(options, 2)
    return first, second


def _mock_classification(rng: random.Random, config: SynthesisConfig) -> dict:
    pos_topic, neg_topic = _two_distinct(rng, _TOPICS)
    quality = rng.choice(_QUALITIES)
    with_text = config.modality.query_has_text
    input_text = _sentence(rng, "A traveler describes") if with_text else ""
    return {
        "description": _description(rng),
        "task_instruction": "Classify the scene by the landmark it centers on.",
        "input_text": input_text,
        "label": f"{quality} {pos_topic}",
        "misleading_label": f"{quality} {neg_topic}",
        "evaluation": "Relevance and plausibility hold; clarity is acceptable.",
        "possible_improvements": "Sharpen the contrast between the two labels.",
        "revised_task_instruction": "Identify which landmark the scene centers on.",
        "revised_input_text": input_text,
        "revised_label": f"{quality} {pos_topic}",
        "revised_misleading_label": f"{quality} {neg_topic}",
    }


def _mock_vqa(rng: random.Random) -> dict:
    pos_topic, neg_topic = _two_distinct(rng, _TOPICS)
    return {
        "description": _description(rng),
        "question": f"What structure dominates the {rng.choice(_QUALITIES)} scene?",
        "positive_answer": f"A {pos_topic}.",
        "hard_negative_answer": f"A {neg_topic}.",
        "evaluation": "The answers stay close enough to be challenging.",
        "possible_improvements": "Make the incorrect answer slightly more specific.",
        "revised_question": "Which structure stands at the center of the scene?",
        "revised_positive_answer": f"A {pos_topic}.",
        "revised_hard_negative_answer": f"A {neg_topic}.",
    }


def _mock_retrieval(rng: random.Random, config: SynthesisConfig) -> dict:
    modality = config.modality
    pos_topic, neg_topic = _two_distinct(rng, _TOPICS)
    query = (
        f"{rng.choice(_QUALITIES)} {pos_topic} nearby" if modality.query_has_text else ""
    )
    if modality.doc_has_text:
        # Word choice here must steer clear of the banned generation terms.
        positive = (
            f"The {rng.choice(_QUALITIES)} {pos_topic} welcomes visitors each spring, "
            f"and local guides recount its history in detail."
        )
        negative = (
            f"A {rng.choice(_QUALITIES)} {neg_topic} lies a short walk away, "
            f"though little has been written about it."
        )
    else:
        positive = negative = ""
    return {
        "description": _description(rng),
        "task_instruction": "Given the scene, retrieve material about the same landmark.",
        "query": query,
        "positive_document": positive,
        "hard_negative_document": negative,
        "evaluation": "The pairing is plausible and the distractor is near-topic.",
        "possible_improvements": "Tighten the link between the scene and the match.",
        "revised_task_instruction": "Retrieve material describing the landmark in the scene.",
        "revised_query": query,
        "revised_positive_document": positive,
        "revised_hard_negative_document": negative,
    }
