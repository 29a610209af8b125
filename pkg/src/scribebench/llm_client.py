"""Chat-completions client with retries, rate limiting, bounded concurrency and a disk cache."""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import os
import random
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

from ._io import atomic_write_text

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "other")

# Temperature defaults per use.
JUDGE_TEMPERATURE = 0.0
GENERATION_TEMPERATURE = 0.2
SYNTHESIS_TEMPERATURE = 0.7


class LLMError(RuntimeError):
    """Base class for chat client failures."""


class RetriesExhausted(LLMError):
    pass


class NonRetryableError(LLMError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"HTTP {status}: {detail[:200]}")
        self.status = status


class MalformedResponse(LLMError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = GENERATION_TEMPERATURE
    max_tokens: int = 1024
    seed: Optional[int] = None
    force_structured_output: bool = False

    def __post_init__(self):
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("messages must be non-empty")
        if msgs[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def canonical(self) -> list:
        # Fixed field order; the list form keeps it independent of dict ordering.
        return [
            ["model", self.model],
            ["messages", [[m.role, m.content] for m in self.messages]],
            ["temperature", float(self.temperature)],
            ["max_tokens", int(self.max_tokens)],
            ["seed", self.seed],
            ["force_structured_output", bool(self.force_structured_output)],
        ]

    def payload(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        if self.force_structured_output:
            body["response_format"] = {"type": "json_object"}
        return body


def cache_key(req: ChatRequest) -> str:
    blob = json.dumps(req.canonical(), separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @classmethod
    def from_body(cls, body) -> "ChatResponse":
        try:
            choice = body["choices"][0]
            content = choice["message"].get("content")
            raw_reason = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError, AttributeError):
            raise MalformedResponse("response lacks choices[0].message") from None
        reason = raw_reason if raw_reason in ("stop", "length") else "other"
        if reason == "stop" and not isinstance(content, str):
            raise MalformedResponse("finish_reason is stop but content is missing")
        usage = body.get("usage") or {}
        return cls(
            content if isinstance(content, str) else "",
            reason,
            int(usage.get("prompt_tokens") or 0),
            int(usage.get("completion_tokens") or 0),
        )


@dataclass(frozen=True)
class ClientConfig:
    base_url: str = "http://127.0.0.1:8000"
    api_key_env_name: str = "SCRIBEBENCH_API_KEY"
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_concurrency: int = 4
    requests_per_minute: Optional[int] = None
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")


class RateLimiter:
    """Sliding 60 s window: at most ``per_minute`` acquisitions in any window."""

    def __init__(
        self,
        per_minute: Optional[int],
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        window: float = 60.0,
    ):
        self.per_minute = per_minute
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._issued: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.per_minute is None:
            return
        while True:
            with self._lock:
                now = self._clock()
                while self._issued and now - self._issued[0] >= self.window:
                    self._issued.popleft()
                if len(self._issued) < self.per_minute:
                    self._issued.append(now)
                    return
                wait = self.window - (now - self._issued[0])
            self._sleep(max(wait, 0.0))


class ResponseCache:
    """Write-once on-disk store of raw response bodies keyed by request digest."""

    def __init__(self, root: Optional[str | os.PathLike]):
        self.root = Path(root) if root else None

    def _path(self, key: str) -> Path:
        return self.root / "chat" / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        if self.root is None:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, key: str, request: list, body: dict) -> None:
        if self.root is None:
            return
        path = self._path(key)
        if path.exists():
            return
        entry = {"key": key, "request": request, "response": body}
        atomic_write_text(path, json.dumps(entry, ensure_ascii=False, sort_keys=True))

    def clear(self) -> int:
        if self.root is None or not (self.root / "chat").exists():
            return 0
        n = sum(1 for _ in (self.root / "chat").rglob("*.json"))
        shutil.rmtree(self.root / "chat")
        return n


def _retryable_status(status: int) -> bool:
    return status == 429 or 500 <= status < 600


class ChatClient:
    """Thread-safe client shared by generator, synthesis and judge.

    ``transport``, ``sleep`` and ``rng`` are injectable so tests can script
    the wire and skip real backoff delays.
    """

    def __init__(
        self,
        cfg: ClientConfig,
        *,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
        limiter: Optional[RateLimiter] = None,
    ):
        self.cfg = cfg
        self.cache = ResponseCache(cfg.cache_dir)
        self.limiter = limiter or RateLimiter(cfg.requests_per_minute)
        self._http = httpx.Client(timeout=cfg.timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env_name)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def backoff_delay(self, attempt: int) -> float:
        base = self.cfg.backoff_base * (2**attempt)
        with self._lock:
            return base * (0.5 + self._rng.random() / 2)

    def _post(self, req: ChatRequest) -> dict:
        url = self.cfg.base_url.rstrip("/") + "/v1/chat/completions"
        last: Exception | str = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                delay = self.backoff_delay(attempt - 1)
                logger.warning("retrying %s in %.2fs (%s)", req.model, delay, last)
                self._sleep(delay)
            self.limiter.acquire()
            with self._slots:
                with self._lock:
                    self.network_calls += 1
                try:
                    resp = self._http.post(url, json=req.payload(), headers=self._headers())
                except httpx.TimeoutException as exc:
                    last = exc
                    continue
                except httpx.TransportError as exc:
                    raise LLMError(f"transport failure talking to {url}: {exc}") from exc
            if _retryable_status(resp.status_code):
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise NonRetryableError(resp.status_code, resp.text)
            try:
                return resp.json()
            except ValueError:
                raise MalformedResponse("response body is not JSON") from None
        raise RetriesExhausted(f"gave up after {self.cfg.max_retries} retries: {last}")

    def chat(self, req: ChatRequest) -> ChatResponse:
        key = cache_key(req)
        cached = self.cache.get(key)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return ChatResponse.from_body(cached)
        body = self._post(req)
        response = ChatResponse.from_body(body)
        self.cache.put(key, req.canonical(), body)
        return response

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def messages(*pairs: Sequence[str]) -> tuple[Message, ...]:
    return tuple(Message(role, content) for role, content in pairs)
