"""The single chokepoint for LLM traffic.

Three modes:

* ``live``   - every call goes to the OpenAI-compatible endpoint.
* ``record`` - calls are served from the fixture store when present,
  otherwise issued and persisted.
* ``replay`` - only the fixture store is consulted; no HTTP client is
  ever created, so no network activity is possible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import httpx
import numpy as np

from .embedding import HashingEmbedder
from .prompts import CORRECTIVE_JSON, Purpose, PromptBundle, PromptError, unresolved_placeholders

log = logging.getLogger(__name__)

API_KEY_ENV = "AUTOML_LLM_API_KEY"
MODES = ("live", "record", "replay")


class GatewayError(RuntimeError):
    pass


class ReplayMiss(GatewayError):
    def __init__(self, fingerprint: str, purpose: str):
        super().__init__(f"replay miss for purpose {purpose!r}: fingerprint {fingerprint} not in fixture store")
        self.fingerprint = fingerprint
        self.purpose = purpose


class TransportFailure(GatewayError):
    pass


class AuthFailure(GatewayError):
    pass


def fingerprint(purpose: str, system_text: str, user_text: str) -> str:
    payload = json.dumps([str(purpose), system_text, user_text], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def bundle_fingerprint(bundle: PromptBundle) -> str:
    return fingerprint(bundle.purpose.value, bundle.system_text, bundle.user_text)


@dataclass(frozen=True)
class LLMResponse:
    text: str
    request_fingerprint: str
    recorded: bool


class FixtureStore:
    """fingerprint -> {purpose, response}, persisted as one JSON document."""

    def __init__(self, path=None, entries: Mapping[str, dict] | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        if self.path is not None and self.path.exists():
            self._entries.update(json.loads(self.path.read_text(encoding="utf-8")))
        if entries:
            self._entries.update(entries)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, fp):
        return fp in self._entries

    def get(self, fp: str) -> str | None:
        entry = self._entries.get(fp)
        return None if entry is None else entry["response"]

    def put(self, fp: str, purpose: str, response: str) -> None:
        with self._lock:
            self._entries[fp] = {"purpose": purpose, "response": response}
            self._flush()

    def add(self, bundle: PromptBundle, response: str) -> str:
        fp = bundle_fingerprint(bundle)
        self.put(fp, bundle.purpose.value, response)
        return fp

    def entries(self) -> dict[str, dict]:
        return dict(self._entries)

    def _flush(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(self._entries, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                       encoding="utf-8")
        os.replace(tmp, self.path)


@dataclass
class GatewayConfig:
    mode: str = "replay"
    base_url: str = "https://api.openai.com/v1"
    models: dict = field(default_factory=lambda: {"default": "gpt-3.5-turbo"})
    embedding_model: str = "text-embedding-ada-002"
    # "hashing" for the offline encoder, "remote" for the embeddings endpoint
    embedder: str = "hashing"
    embedding_dim: int = 256
    max_retries: int = 3
    timeout: float = 60.0

    def model_for(self, purpose: Purpose) -> str:
        return self.models.get(purpose.value, self.models.get("default", "gpt-3.5-turbo"))


class Gateway:
    def __init__(self, config: GatewayConfig | None = None, store: FixtureStore | None = None,
                 transport: httpx.BaseTransport | None = None, api_key: str | None = None):
        self.config = config or GatewayConfig()
        if self.config.mode not in MODES:
            raise ValueError(f"unknown gateway mode {self.config.mode!r}")
        self.store = store if store is not None else FixtureStore()
        self._transport = transport
        self._api_key = api_key
        self._client: httpx.Client | None = None
        self._client_lock = threading.Lock()
        self._fallback = HashingEmbedder(self.config.embedding_dim)
        self.calls = 0

    @property
    def mode(self) -> str:
        return self.config.mode

    def _http(self) -> httpx.Client:
        if self.mode == "replay":
            raise GatewayError("network access attempted in replay mode")
        with self._client_lock:
            if self._client is None:
                key = self._api_key or os.environ.get(API_KEY_ENV)
                headers = {"Authorization": f"Bearer {key}"} if key else {}
                self._client = httpx.Client(base_url=self.config.base_url, headers=headers,
                                            timeout=self.config.timeout, transport=self._transport)
        return self._client

    def _post(self, path: str, body: dict) -> dict:
        client = self._http()
        last = None
        for attempt in range(1, self.config.max_retries + 1):
            try:
                resp = client.post(path, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("LLM transport error (attempt %d): %s", attempt, last)
                continue
            if resp.status_code in (401, 403):
                raise AuthFailure(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                log.warning("LLM endpoint error (attempt %d): %s", attempt, last)
                continue
            if resp.status_code >= 400:
                raise TransportFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
            self.calls += 1
            return resp.json()
        raise TransportFailure(f"gave up after {self.config.max_retries} attempts: {last}")

    def complete(self, bundle: PromptBundle) -> LLMResponse:
        leftovers = unresolved_placeholders(bundle.system_text)
        if leftovers:
            raise PromptError(f"unresolved placeholders in system text: {leftovers}")
        fp = bundle_fingerprint(bundle)
        if self.mode in ("replay", "record"):
            cached = self.store.get(fp)
            if cached is not None:
                return LLMResponse(cached, fp, recorded=True)
            if self.mode == "replay":
                raise ReplayMiss(fp, bundle.purpose.value)
        body = {
            "model": self.config.model_for(bundle.purpose),
            "temperature": 0,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
        }
        doc = self._post("/chat/completions", body)
        try:
            text = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportFailure("malformed chat-completion response") from None
        if self.mode == "record":
            self.store.put(fp, bundle.purpose.value, text)
        return LLMResponse(text, fp, recorded=False)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        if self.config.embedder == "hashing":
            return self._fallback(text)
        fp = fingerprint("embed", self.config.embedding_model, text)
        if self.mode in ("replay", "record"):
            cached = self.store.get(fp)
            if cached is not None:
                return self._check_dim(np.asarray(json.loads(cached), dtype=float))
            if self.mode == "replay":
                raise ReplayMiss(fp, "embed")
        doc = self._post("/embeddings", {"model": self.config.embedding_model, "input": text})
        vec = self._check_dim(np.asarray(doc["data"][0]["embedding"], dtype=float))
        if self.mode == "record":
            self.store.put(fp, "embed", json.dumps(vec.tolist()))
        return vec

    def _check_dim(self, vec: np.ndarray) -> np.ndarray:
        if vec.shape != (self.config.embedding_dim,):
            raise GatewayError(f"embedding dimension {vec.shape} does not match configured {self.config.embedding_dim}")
        return vec

    @property
    def embedder_name(self) -> str:
        if self.config.embedder == "hashing":
            return self._fallback.name
        return f"remote:{self.config.embedding_model}"

    def close(self):
        if self._client is not None:
            self._client.close()


def complete_json(gateway: Gateway, bundle: PromptBundle, parse: Callable, corrective: Callable | None = None):
    """Complete, parse, and on failure re-issue once with a corrective note.

    ``parse`` turns response text into a value or raises ``ValueError``.
    ``corrective`` maps that error to the appended instruction.
    """
    text = gateway.complete(bundle).text
    try:
        return parse(text)
    except ValueError as exc:
        message = corrective(exc) if corrective else CORRECTIVE_JSON
        log.info("retrying %s after invalid answer: %s", bundle.purpose.value, exc)
        retry = bundle.with_correction(message)
        return parse(gateway.complete(retry).text)
