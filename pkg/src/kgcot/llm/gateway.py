"""Provider-agnostic chat/embedding gateway.

The gateway wraps a provider with the cross-cutting behaviour every call
needs: response caching, retry with exponential backoff, an in-flight cap
and a requests-per-minute limit. Providers only have to implement a single
blocking call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TEMPLATE_IDS = ("extraction", "select", "prune", "generate", "eval", "judge")


class ProviderError(RuntimeError):
    """Base class for provider failures surfaced by the gateway."""


class TransientProviderError(ProviderError):
    """Raised by providers for failures worth retrying (timeouts, 429, 5xx)."""


class TransportError(ProviderError):
    """Retries exhausted. ``attempts`` holds one message per failed try."""

    def __init__(self, message: str, attempts: Sequence[str] = ()):
        self.attempts = list(attempts)
        trace = "; ".join(f"#{i + 1}: {a}" for i, a in enumerate(self.attempts))
        super().__init__(f"{message} [{trace}]" if trace else message)


class CredentialError(ProviderError):
    """Missing or rejected credentials. Never retried."""


class DimensionError(ProviderError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        if self.template_id not in TEMPLATE_IDS:
            raise ValueError(f"unknown template id {self.template_id!r}")


@dataclass
class ProviderConfig:
    provider: str = "scripted"
    model: str = "default"
    endpoint: str | None = None
    credential_env: str | None = None
    max_retries: int = 3
    backoff_base: float = 0.5
    rate_limit: int = 600  # requests per minute
    in_flight: int = 8
    batch_size: int = 64
    timeout: float = 60.0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.rate_limit < 1 or self.in_flight < 1 or self.batch_size < 1:
            raise ValueError("rate_limit, in_flight and batch_size must be >= 1")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")

    def credential(self) -> str | None:
        if not self.credential_env:
            return None
        value = os.environ.get(self.credential_env)
        if not value:
            raise CredentialError(f"environment variable {self.credential_env} is not set")
        return value


class ChatProvider(Protocol):
    provider_id: str
    model_id: str

    def complete(self, request: ChatRequest) -> str: ...


class EmbeddingProvider(Protocol):
    provider_id: str
    model_id: str

    def embed(self, texts: list[str]) -> list[Sequence[float]]: ...


class RateLimiter:
    """Sliding one-minute window limiter."""

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        self.per_minute = per_minute
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = self.window - (now - self._stamps[0])
            self._sleep(max(wait, 1e-3))


@dataclass
class GatewayStats:
    provider_calls: int = 0
    cache_hits: int = 0
    retries: int = 0
    in_flight: int = 0
    max_in_flight: int = 0
    attempt_log: list[str] = field(default_factory=list)


class ResponseCache:
    """Content-addressed cache; one file per key under ``root`` when given.

    Layout: ``<root>/<kind>/<key[:2]>/<key>.bin``.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else None
        self._mem: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def _path(self, kind: str, key: str) -> Path:
        assert self.root is not None
        return self.root / kind / key[:2] / f"{key}.bin"

    def get(self, kind: str, key: str) -> bytes | None:
        with self._lock:
            hit = self._mem.get(f"{kind}/{key}")
        if hit is not None or self.root is None:
            return hit
        path = self._path(kind, key)
        if path.exists():
            data = path.read_bytes()
            with self._lock:
                self._mem[f"{kind}/{key}"] = data
            return data
        return None

    def put(self, kind: str, key: str, value: bytes) -> None:
        with self._lock:
            self._mem[f"{kind}/{key}"] = value
        if self.root is not None:
            path = self._path(kind, key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{threading.get_ident()}")
            tmp.write_bytes(value)
            os.replace(tmp, path)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


class _Gate:
    """Shared retry/limit machinery for the chat and embedding gateways."""

    def __init__(self, config: ProviderConfig, cache: ResponseCache | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.cache = cache if cache is not None else ResponseCache()
        self.stats = GatewayStats()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.in_flight)
        self._limiter = RateLimiter(config.rate_limit, clock=clock, sleep=sleep)
        self._stats_lock = threading.Lock()

    def _call(self, fn, label: str):
        attempts: list[str] = []
        for attempt in range(self.config.max_retries + 1):
            self._limiter.acquire()
            with self._slots:
                with self._stats_lock:
                    self.stats.provider_calls += 1
                    self.stats.in_flight += 1
                    self.stats.max_in_flight = max(self.stats.max_in_flight, self.stats.in_flight)
                try:
                    return fn()
                except CredentialError:
                    raise
                except TransientProviderError as exc:
                    attempts.append(f"{type(exc).__name__}: {exc}")
                finally:
                    with self._stats_lock:
                        self.stats.in_flight -= 1
            if attempt < self.config.max_retries:
                with self._stats_lock:
                    self.stats.retries += 1
                    self.stats.attempt_log.append(f"{label}: {attempts[-1]}")
                delay = self.config.backoff_base * (2 ** attempt)
                logger.warning("%s failed (%s); retry %d in %.2fs", label, attempts[-1],
                               attempt + 1, delay)
                self._sleep(delay)
        raise TransportError(f"{label} failed after {len(attempts)} attempt(s)", attempts)


class ChatGateway(_Gate):
    def __init__(self, provider: ChatProvider, config: ProviderConfig | None = None, **kw):
        super().__init__(config or ProviderConfig(provider=provider.provider_id, model=provider.model_id), **kw)
        self.provider = provider

    def cache_key(self, request: ChatRequest) -> str:
        return _digest({
            "provider": self.provider.provider_id, "model": self.provider.model_id,
            "prompt_sha256": hashlib.sha256(request.prompt.encode("utf-8")).hexdigest(),
            "temperature": request.temperature, "max_tokens": request.max_tokens,
        })

    def chat(self, request: ChatRequest) -> str:
        key = self.cache_key(request)
        with self.cache.key_lock(key):
            hit = self.cache.get("chat", key)
            if hit is not None:
                with self._stats_lock:
                    self.stats.cache_hits += 1
                return hit.decode("utf-8")
            text = self._call(lambda: self.provider.complete(request), f"chat[{request.template_id}]")
            if not isinstance(text, str):
                raise ProviderError(f"provider returned {type(text).__name__}, expected str")
            self.cache.put("chat", key, text.encode("utf-8"))
            return text


class EmbedGateway(_Gate):
    def __init__(self, provider: EmbeddingProvider, config: ProviderConfig | None = None, **kw):
        super().__init__(config or ProviderConfig(provider=provider.provider_id, model=provider.model_id), **kw)
        self.provider = provider
        self.dimension: int | None = None

    @property
    def identity(self) -> str:
        return f"{self.provider.provider_id}/{self.provider.model_id}"

    def cache_key(self, text: str) -> str:
        return _digest({"provider": self.provider.provider_id, "model": self.provider.model_id, "text": text})

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Embed ``texts``; returns a float32 array with one row per input."""
        texts = list(texts)
        if not texts:
            raise ValueError("embed() needs a non-empty batch")
        rows: dict[int, np.ndarray] = {}
        missing: list[int] = []
        for i, t in enumerate(texts):
            hit = self.cache.get("embed", self.cache_key(t))
            if hit is not None:
                rows[i] = np.frombuffer(hit, dtype="<f4")
                with self._stats_lock:
                    self.stats.cache_hits += 1
            else:
                missing.append(i)
        unique = list(dict.fromkeys(texts[i] for i in missing))
        fresh: dict[str, np.ndarray] = {}
        bs = self.config.batch_size
        for start in range(0, len(unique), bs):
            batch = unique[start:start + bs]
            out = self._call(lambda b=batch: self.provider.embed(b), f"embed[{start // bs}]")
            if len(out) != len(batch):
                raise ProviderError(f"provider returned {len(out)} vectors for {len(batch)} texts")
            for t, v in zip(batch, out):
                arr = np.asarray(v, dtype=np.float64)
                if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                    raise ProviderError(f"invalid embedding for {t!r}")
                arr = arr.astype("<f4")
                fresh[t] = arr
                self.cache.put("embed", self.cache_key(t), arr.tobytes())
        for i in missing:
            rows[i] = fresh[texts[i]]
        dims = {r.shape[0] for r in rows.values()}
        if len(dims) != 1:
            raise DimensionError(f"inconsistent embedding dimensions {sorted(dims)}")
        return np.stack([rows[i] for i in range(len(texts))])

