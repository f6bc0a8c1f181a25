"""Concrete chat and embedding providers.

``scripted`` providers are deterministic stand-ins used for offline runs and
tests. ``openai`` providers speak the OpenAI-compatible HTTP API
(``/chat/completions`` and ``/embeddings``).

Scripted rule file (YAML, ``version: 1``)::

    version: 1
    chat:
      rules:
        - template: prune          # optional, matches any template if omitted
          contains: ["PRUNE"]      # every substring must occur in the prompt
          reply: "1,3"
      default: null                # reply when nothing matches; error when null
    embed:
      dimension: 16
      vectors:                     # explicit vectors, keyed by folded text
        ataxia: [1, 0, 0]
      aliases:                     # text embedded at a fixed cosine to another
        - text: bilateral optic disc swelling
          near: abnormality of the optic disc
          cosine: 0.87

Rules are tried in file order; the first match wins.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import httpx
import numpy as np
import yaml

from ..graph_store import fold_name
from .gateway import (
    ChatRequest,
    CredentialError,
    ProviderConfig,
    ProviderError,
    TransientProviderError,
)

RULES_VERSION = 1


class ScriptError(ProviderError):
    """No scripted rule matched, or the rule file is invalid."""


@dataclass(frozen=True)
class ChatRule:
    reply: str
    template: str | None = None
    contains: tuple[str, ...] = ()

    def matches(self, request: ChatRequest) -> bool:
        if self.template is not None and self.template != request.template_id:
            return False
        return all(s in request.prompt for s in self.contains)


def _read_rules(source: str | Path | Mapping) -> dict:
    if isinstance(source, Mapping):
        data = dict(source)
    else:
        with open(source, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    version = data.get("version")
    if version != RULES_VERSION:
        raise ScriptError(f"unsupported scripted rule file version {version!r}")
    return data


class ScriptedChatProvider:
    provider_id = "scripted"

    def __init__(self, rules: Sequence[ChatRule], default: str | None = None, model_id: str | None = None):
        self.rules = list(rules)
        self.default = default
        self.model_id = model_id or "rules-" + hashlib.sha256(
            json.dumps([[r.template, list(r.contains), r.reply] for r in self.rules] + [default],
                       ensure_ascii=False).encode("utf-8")).hexdigest()[:12]

    @classmethod
    def from_file(cls, source: str | Path | Mapping) -> "ScriptedChatProvider":
        chat = _read_rules(source).get("chat") or {}
        rules = []
        for i, raw in enumerate(chat.get("rules") or []):
            if "reply" not in raw:
                raise ScriptError(f"chat rule #{i} has no reply")
            contains = raw.get("contains") or ()
            if isinstance(contains, str):
                contains = (contains,)
            rules.append(ChatRule(str(raw["reply"]), raw.get("template"), tuple(contains)))
        return cls(rules, chat.get("default"))

    def complete(self, request: ChatRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.reply
        if self.default is not None:
            return self.default
        raise ScriptError(f"no scripted rule matches a {request.template_id!r} request")


def _hash_vector(text: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


class ScriptedEmbedder:
    """Deterministic embedder: explicit vectors, then aliases, then a text hash.

    Texts are folded (case, surrounding and repeated whitespace) first, so
    ``"Ataxia "`` and ``"ataxia"`` embed identically.
    """

    provider_id = "scripted"

    def __init__(self, dimension: int = 16, vectors: Mapping[str, Sequence[float]] | None = None,
                 aliases: Sequence[Mapping] = ()):
        self.dimension = dimension
        self.vectors = {fold_name(k): np.asarray(v, dtype=np.float64) for k, v in (vectors or {}).items()}
        self.aliases = {fold_name(a["text"]): (fold_name(a["near"]), float(a["cosine"])) for a in aliases}
        for text, (_, c) in self.aliases.items():
            if not -1.0 <= c <= 1.0:
                raise ScriptError(f"alias cosine for {text!r} outside [-1, 1]")
        fingerprint = json.dumps({
            "dim": dimension,
            "vectors": {k: v.tolist() for k, v in sorted(self.vectors.items())},
            "aliases": sorted([k, *v] for k, v in self.aliases.items()),
        }, sort_keys=True)
        self.model_id = f"hash{dimension}-{hashlib.sha256(fingerprint.encode()).hexdigest()[:10]}"

    @classmethod
    def from_file(cls, source: str | Path | Mapping) -> "ScriptedEmbedder":
        embed = _read_rules(source).get("embed") or {}
        return cls(int(embed.get("dimension", 16)), embed.get("vectors"), embed.get("aliases") or ())

    def vector(self, text: str) -> np.ndarray:
        key = fold_name(text)
        if key in self.vectors:
            return self.vectors[key]
        if key in self.aliases:
            near, c = self.aliases[key]
            base = self.vector(near)
            base = base / np.linalg.norm(base)
            noise = _hash_vector(key, base.shape[0])
            noise = noise - noise.dot(base) * base
            noise /= np.linalg.norm(noise)
            return c * base + math.sqrt(max(0.0, 1.0 - c * c)) * noise
        return _hash_vector(key, self.dimension)

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self.vector(t) for t in texts]


def _raise_for_status(resp: httpx.Response) -> None:
    if resp.status_code in (401, 403):
        raise CredentialError(f"provider rejected credentials (HTTP {resp.status_code})")
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientProviderError(f"HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")


class _HttpProvider:
    provider_id = "openai"

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        if not config.endpoint:
            raise ProviderError("remote provider needs an endpoint")
        self.model_id = config.model
        self._config = config
        self._client = client or httpx.Client(timeout=config.timeout)

    def _post(self, path: str, payload: dict) -> dict:
        headers = {}
        token = self._config.credential()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        url = self._config.endpoint.rstrip("/") + path
        try:
            resp = self._client.post(url, json=payload, headers=headers)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientProviderError(f"{type(exc).__name__}: {exc}") from exc
        _raise_for_status(resp)
        try:
            return resp.json()
        except ValueError as exc:
            raise TransientProviderError("response body is not JSON") from exc


class OpenAIChatProvider(_HttpProvider):
    def complete(self, request: ChatRequest) -> str:
        body = self._post("/chat/completions", {
            "model": self.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected chat response shape: {exc}") from exc


class OpenAIEmbedder(_HttpProvider):
    def embed(self, texts: list[str]) -> list[list[float]]:
        body = self._post("/embeddings", {"model": self.model_id, "input": texts})
        try:
            items = sorted(body["data"], key=lambda d: d["index"])
            return [d["embedding"] for d in items]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"unexpected embedding response shape: {exc}") from exc


def make_chat_provider(config: ProviderConfig):
    if config.provider == "scripted":
        rules = config.options.get("rules")
        if not rules:
            raise ProviderError("scripted chat provider needs options.rules (rule file path)")
        return ScriptedChatProvider.from_file(rules)
    if config.provider == "openai":
        return OpenAIChatProvider(config)
    raise ProviderError(f"unknown chat provider {config.provider!r}")


def make_embed_provider(config: ProviderConfig):
    if config.provider == "scripted":
        rules = config.options.get("rules")
        if rules:
            return ScriptedEmbedder.from_file(rules)
        return ScriptedEmbedder(int(config.options.get("dimension", 16)))
    if config.provider == "openai":
        return OpenAIEmbedder(config)
    raise ProviderError(f"unknown embedding provider {config.provider!r}")
