"""Chat-completion transport: OpenAI-compatible HTTP client plus a
record/replay layer so every live code path is testable offline.

Request bodies are canonicalized (sorted keys, no whitespace) so the same
input always produces the same bytes; the replay store keys responses by the
SHA-256 of those bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import requests

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
}


class BackendError(RuntimeError):
    """Base class for backend failures; carries the HTTP status when known."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class AuthError(BackendError):
    pass


class RetryExhaustedError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class TransportError(BackendError):
    """Network-level failure (connection refused, timeout)."""


class ReplayMissError(BackendError):
    """Replay store has no response for this request hash."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    image_payload: tuple[str, str] | None = None  # (media type, base64 data)

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad message role {self.role!r}")
        if not self.content and self.image_payload is None:
            raise ValueError("message needs content or an image payload")

    def to_wire(self) -> dict:
        if self.image_payload is None:
            return {"role": self.role, "content": self.content}
        media, data = self.image_payload
        parts: list[dict] = []
        if self.content:
            parts.append({"type": "text", "text": self.content})
        parts.append(
            {"type": "image_url", "image_url": {"url": f"data:{media};base64,{data}"}}
        )
        return {"role": self.role, "content": parts}


@dataclass
class BackendConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4.1-mini"
    api_key_env: str = "MEDROUTE_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")


def canonical_body(cfg: BackendConfig, messages: list[ChatMessage], temperature: float | None = None) -> bytes:
    doc = {
        "model": cfg.model_name,
        "messages": [m.to_wire() for m in messages],
        "temperature": cfg.temperature if temperature is None else temperature,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def request_hash(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()


# transport: (url, headers, body) -> (status code, response text)
Transport = Callable[[str, dict, bytes], tuple[int, str]]


def live_transport(cfg: BackendConfig) -> Transport:
    def post(url: str, headers: dict, body: bytes) -> tuple[int, str]:
        try:
            resp = requests.post(url, headers=headers, data=body, timeout=cfg.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        return resp.status_code, resp.text

    return post


def _resolve_api_key(cfg: BackendConfig) -> str:
    key = os.environ.get(cfg.api_key_env, "")
    if not key:
        raise AuthError(f"api key env {cfg.api_key_env} is empty or unset")
    return key


def chat_complete(
    cfg: BackendConfig,
    messages: list[ChatMessage],
    transport: Transport | None = None,
    temperature: float | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """POST a chat-completion request; retry 429/5xx/timeouts with exponential
    backoff, fail fast on auth and other 4xx errors."""
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    if transport is None:
        headers["Authorization"] = f"Bearer {_resolve_api_key(cfg)}"
        transport = live_transport(cfg)
    body = canonical_body(cfg, messages, temperature)

    last: BackendError | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt > 0:
            sleep(cfg.retry_backoff_s * 2 ** (attempt - 1))
        try:
            status, text = transport(url, headers, body)
        except TransportError as exc:
            last = exc
            continue
        if status in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {status})", status=status)
        if status in RETRYABLE_STATUS:
            last = BackendError(f"retryable HTTP {status}", status=status)
            continue
        if status != 200:
            raise BackendError(f"request rejected (HTTP {status}): {text[:200]}", status=status)
        try:
            doc = json.loads(text)
            content = doc["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                f"cannot parse completion response: {exc}", status=status
            ) from exc
        if not isinstance(content, str):
            raise MalformedResponseError("response content is not text", status=status)
        return content
    raise RetryExhaustedError(
        f"gave up after {cfg.max_retries} retries: {last}",
        status=getattr(last, "status", None),
    )


@dataclass
class ChatBackend:
    """A config bound to a transport; the handle every agent call goes through."""

    cfg: BackendConfig = field(default_factory=BackendConfig)
    transport: Transport | None = None
    sleep: Callable[[float], None] = time.sleep

    def complete(self, messages: list[ChatMessage], temperature: float | None = None) -> str:
        return chat_complete(
            self.cfg, messages, transport=self.transport, temperature=temperature, sleep=self.sleep
        )


def caption_image(backend: ChatBackend, image_ref: str | Path, instruction: str | None = None) -> str:
    """Send the image with a fixed captioning instruction, return the caption."""
    path = Path(image_ref)
    try:
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read image {path}: {exc}") from exc
    media = _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
    if instruction is None:
        from .orchestrator import load_prompt

        instruction = load_prompt("caption")
    msg = ChatMessage(role="user", content=instruction, image_payload=(media, payload))
    return backend.complete([msg])


class RecordReplayBackend:
    """Wraps a backend: record persists (hash -> response) pairs to a JSONL
    store; replay answers from the store and fails loudly on a miss."""

    def __init__(
        self,
        mode: str,
        store: str | Path,
        backend: ChatBackend | None = None,
        cfg: BackendConfig | None = None,
    ):
        if mode not in ("record", "replay"):
            raise ValueError("mode must be 'record' or 'replay'")
        if mode == "record" and backend is None:
            raise ValueError("record mode needs a live backend to wrap")
        self.mode = mode
        self.store = Path(store)
        self.backend = backend
        self.cfg = cfg if cfg is not None else (backend.cfg if backend else BackendConfig())
        self._lock = threading.Lock()
        self._cache: dict[str, str] = {}
        if mode == "replay":
            if not self.store.exists():
                raise FileNotFoundError(f"replay store {self.store} does not exist")
            self._load()
        elif self.store.exists():
            self._load()

    def _load(self) -> None:
        with self.store.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entry = json.loads(line)
                    self._cache[entry["hash"]] = entry["response"]

    def complete(self, messages: list[ChatMessage], temperature: float | None = None) -> str:
        h = request_hash(canonical_body(self.cfg, messages, temperature))
        with self._lock:
            if h in self._cache:
                return self._cache[h]
        if self.mode == "replay":
            raise ReplayMissError(f"no recorded response for request {h}")
        response = self.backend.complete(messages, temperature)
        with self._lock:
            self._cache[h] = response
            with self.store.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"hash": h, "response": response}) + "\n")
        return response


def record_replay(
    mode: str,
    store: str | Path,
    backend: ChatBackend | None = None,
    cfg: BackendConfig | None = None,
) -> RecordReplayBackend:
    return RecordReplayBackend(mode, store, backend=backend, cfg=cfg)
