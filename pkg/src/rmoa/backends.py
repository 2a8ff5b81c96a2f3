"""Chat and embedding backend protocols plus the HTTP wire clients.

Both wire clients speak the widespread JSON chat-completions and embeddings
shapes: POST ``{base}/chat/completions`` with ``{"model", "messages",
"temperature", "max_tokens"}`` and POST ``{base}/embeddings`` with
``{"model", "input"}``. Transient failures (connection errors, timeouts,
HTTP 429/5xx) are retried with exponential backoff; anything else is a
protocol error and fails immediately.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import requests

from .accounting import TokenUsage
from .errors import BackendUnavailableError, ProtocolError

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatResult:
    """One completion plus the usage the backend reported for it."""

    text: str
    usage: TokenUsage
    model: str


@dataclass(frozen=True)
class EmbeddingBatch:
    """Raw embedding rows for a batch of texts, in input order."""

    vectors: tuple[tuple[float, ...], ...]
    usage: TokenUsage
    model: str


@runtime_checkable
class ChatBackend(Protocol):
    model: str

    def chat(
        self, messages: list[dict[str, str]], *, temperature: float, max_tokens: int
    ) -> ChatResult: ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    model: str
    max_input_chars: int | None

    def embed(self, texts: Sequence[str]) -> EmbeddingBatch: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retry with exponential backoff: base, 2x base, 4x base, ..."""

    max_attempts: int = 3
    base_delay_s: float = 0.5

    def delay(self, attempt: int) -> float:
        return self.base_delay_s * (2**attempt)


def _post_json(
    session: requests.Session,
    url: str,
    payload: dict,
    headers: dict[str, str],
    retry: RetryPolicy,
    timeout_s: float,
) -> dict:
    last_error: Exception | None = None
    for attempt in range(retry.max_attempts):
        try:
            response = session.post(url, json=payload, headers=headers, timeout=timeout_s)
        except requests.RequestException as exc:
            last_error = exc
        else:
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise ProtocolError(f"{url} returned invalid JSON: {exc}") from exc
            if response.status_code not in _RETRYABLE_STATUS:
                raise ProtocolError(
                    f"{url} returned HTTP {response.status_code}: {response.text[:200]}"
                )
            last_error = ProtocolError(
                f"{url} returned HTTP {response.status_code}"
            )
        if attempt + 1 < retry.max_attempts:
            time.sleep(retry.delay(attempt))
    raise BackendUnavailableError(
        f"{url} unreachable after {retry.max_attempts} attempts: {last_error}"
    )


def _auth_headers(api_key: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    return headers


@dataclass
class HttpChatBackend:
    """Chat-completions client for any endpoint speaking the standard shape."""

    base_url: str
    model: str
    api_key: str | None = None
    timeout_s: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        self._session = requests.Session()

    def chat(
        self, messages: list[dict[str, str]], *, temperature: float, max_tokens: int
    ) -> ChatResult:
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        url = self.base_url.rstrip("/") + "/chat/completions"
        data = _post_json(
            self._session, url, payload, _auth_headers(self.api_key), self.retry, self.timeout_s
        )
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data["usage"]
            result = ChatResult(
                text=str(text),
                usage=TokenUsage(
                    int(usage["prompt_tokens"]), int(usage["completion_tokens"])
                ),
                model=self.model,
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat completion payload: {exc}") from exc
        return result


@dataclass
class HttpEmbeddingBackend:
    """Embeddings client for any endpoint speaking the standard shape."""

    base_url: str
    model: str
    api_key: str | None = None
    timeout_s: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    max_input_chars: int | None = None

    def __post_init__(self) -> None:
        self._session = requests.Session()

    def embed(self, texts: Sequence[str]) -> EmbeddingBatch:
        payload = {"model": self.model, "input": list(texts)}
        url = self.base_url.rstrip("/") + "/embeddings"
        data = _post_json(
            self._session, url, payload, _auth_headers(self.api_key), self.retry, self.timeout_s
        )
        try:
            rows = sorted(data["data"], key=lambda row: int(row["index"]))
            vectors = tuple(
                tuple(float(x) for x in row["embedding"]) for row in rows
            )
            usage = data.get("usage", {})
            prompt_tokens = int(usage.get("prompt_tokens", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embeddings payload: {exc}") from exc
        return EmbeddingBatch(
            vectors=vectors,
            usage=TokenUsage(prompt_tokens, 0),
            model=self.model,
        )


@dataclass(frozen=True)
class Backends:
    """The pair of handles a pipeline run needs."""

    chat: ChatBackend
    embedding: EmbeddingBackend | None = None
