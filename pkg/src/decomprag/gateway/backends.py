"""Language-model backends: OpenAI-compatible chat endpoints and scripted tables."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx

from .cache import ResponseCache, cache_key, utc_now

log = logging.getLogger(__name__)

REMOTE_CHAT = "remote-chat"
SCRIPTED = "scripted"
MAX_ATTEMPTS = 5


class BackendError(RuntimeError):
    """Non-retryable backend failure (bad request, malformed response, missing script)."""


class BackendTransportError(BackendError):
    """Network failure or 429/5xx that persisted through all retries."""


class AuthError(BackendError):
    pass


class ScriptMissError(BackendError):
    pass


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 64
    n_samples: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0


@dataclass(frozen=True)
class ScriptTable:
    """Canned responses for a scripted backend.

    Lookup order: exact prompt digest, then the first ``rules`` entry whose
    substrings all occur in the prompt, then ``default``.
    """

    by_digest: dict[str, tuple[str, ...]] = field(default_factory=dict)
    rules: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] = ()
    default: tuple[str, ...] = ()

    def lookup(self, prompt: str) -> tuple[str, ...]:
        hit = self.by_digest.get(prompt_digest(prompt))
        if hit:
            return hit
        for needles, responses in self.rules:
            if all(n in prompt for n in needles):
                return responses
        if self.default:
            return self.default
        raise ScriptMissError(f"no scripted response for prompt digest {prompt_digest(prompt)[:16]}")

    @classmethod
    def from_prompts(cls, table: dict[str, list[str] | str], **kw) -> ScriptTable:
        return cls(by_digest={prompt_digest(p): _as_tuple(r) for p, r in table.items()}, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> ScriptTable:
        rules = []
        for rule in d.get("match", []):
            needles = rule["contains"]
            rules.append((_as_tuple(needles), _as_tuple(rule["responses"])))
        return cls(
            by_digest={k: _as_tuple(v) for k, v in d.get("by_digest", {}).items()},
            rules=tuple(rules),
            default=_as_tuple(d.get("default", ())),
        )

    def to_dict(self) -> dict:
        return {
            "by_digest": {k: list(v) for k, v in sorted(self.by_digest.items())},
            "match": [{"contains": list(n), "responses": list(r)} for n, r in self.rules],
            "default": list(self.default),
        }


def _as_tuple(v) -> tuple[str, ...]:
    return (v,) if isinstance(v, str) else tuple(v)


@dataclass(frozen=True)
class BackendSpec:
    kind: str
    model: str = ""
    endpoint: str = ""
    api_key_env: str | None = None
    script: ScriptTable | None = field(default=None, compare=False)
    native_n: bool = False
    max_concurrency: int | None = None
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind == SCRIPTED:
            if self.script is None:
                raise ValueError("scripted backend needs a script table")
        elif self.kind == REMOTE_CHAT:
            if not self.endpoint or not self.model:
                raise ValueError("remote-chat backend needs endpoint and model")
        else:
            raise ValueError(f"unknown backend kind {self.kind!r}")

    @property
    def id(self) -> str:
        if self.kind == SCRIPTED:
            return f"scripted:{self.model or 'script'}"
        return f"{self.kind}:{self.model}@{self.endpoint}"

    @property
    def cache_model(self) -> str:
        """Model component of cache keys; scripted backends also hash their script."""
        if self.kind == SCRIPTED:
            blob = json.dumps(self.script.to_dict(), sort_keys=True, ensure_ascii=False)
            return f"{self.model}#{hashlib.sha256(blob.encode('utf-8')).hexdigest()[:16]}"
        return self.model

    @classmethod
    def scripted(cls, table: ScriptTable | dict, model: str = "script") -> BackendSpec:
        if isinstance(table, dict):
            table = ScriptTable.from_dict(table)
        return cls(kind=SCRIPTED, model=model, script=table)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> BackendSpec:
        d = dict(d)
        script = d.pop("script", None)
        script_path = d.pop("script_path", None)
        if script_path is not None:
            path = Path(script_path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            script = json.loads(path.read_text(encoding="utf-8"))
        if script is not None and not isinstance(script, ScriptTable):
            script = ScriptTable.from_dict(script)
        return cls(script=script, **d)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "model": self.model,
            "endpoint": self.endpoint,
            "api_key_env": self.api_key_env,
            "native_n": self.native_n,
            "max_concurrency": self.max_concurrency,
            "timeout": self.timeout,
        }
        if self.script is not None:
            d["script"] = self.script.to_dict()
        return d


def _chat_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/chat/completions") else endpoint + "/chat/completions"


class Gateway:
    """Issues completions through the response cache under concurrency bounds.

    ``network_requests`` counts HTTP attempts; ``calls`` counts logical
    ``complete`` invocations per backend id.
    """

    def __init__(
        self,
        cache: ResponseCache | None = None,
        max_concurrency: int = 8,
        client: httpx.Client | None = None,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_attempts: int = MAX_ATTEMPTS,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cache = cache
        self._global = threading.BoundedSemaphore(max_concurrency)
        self._per_backend: dict[str, threading.BoundedSemaphore] = {}
        self._client = client
        self._owns_client = client is None
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.max_attempts = max_attempts
        self._sleep = sleep
        self._lock = threading.Lock()
        self.network_requests = 0
        self.calls: Counter[str] = Counter()

    def close(self) -> None:
        if self._client is not None and self._owns_client:
            self._client.close()
            self._client = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def client(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                self._client = httpx.Client()
            return self._client

    def _backend_sem(self, backend: BackendSpec) -> threading.BoundedSemaphore | None:
        if not backend.max_concurrency:
            return None
        with self._lock:
            if backend.id not in self._per_backend:
                self._per_backend[backend.id] = threading.BoundedSemaphore(backend.max_concurrency)
            return self._per_backend[backend.id]

    def complete(self, backend: BackendSpec, prompt: str, params: DecodingParams) -> list[str]:
        return [e["response"] for e in self.complete_entries(backend, prompt, params)]

    def complete_entries(self, backend: BackendSpec, prompt: str, params: DecodingParams) -> list[dict]:
        """Like :meth:`complete` but returns full cache entries (response + created time)."""
        with self._lock:
            self.calls[backend.id] += 1
        keys = [
            cache_key(backend.kind, backend.cache_model, prompt, params.temperature, params.max_tokens, i)
            for i in range(params.n_samples)
        ]
        entries: list[dict | None] = [self.cache.get(k) if self.cache else None for k in keys]
        missing = [i for i, e in enumerate(entries) if e is None]
        if missing:
            fresh = self._generate(backend, prompt, params, missing)
            for i, text in zip(missing, fresh):
                request = {
                    "backend": backend.id,
                    "kind": backend.kind,
                    "model": backend.model,
                    "temperature": params.temperature,
                    "max_tokens": params.max_tokens,
                    "sample_index": i,
                    "prompt_sha256": prompt_digest(prompt),
                }
                if self.cache:
                    entries[i] = self.cache.put(keys[i], request, text)
                else:
                    entries[i] = {"key": keys[i], "request": request, "response": text, "created": utc_now()}
        return entries  # type: ignore[return-value]

    def _generate(self, backend: BackendSpec, prompt: str, params: DecodingParams, indices: list[int]) -> list[str]:
        if backend.kind == SCRIPTED:
            responses = backend.script.lookup(prompt)
            return [responses[i % len(responses)] for i in indices]
        sem = self._backend_sem(backend)
        with self._global:
            if sem is None:
                return self._remote(backend, prompt, params, len(indices))
            with sem:
                return self._remote(backend, prompt, params, len(indices))

    def _remote(self, backend: BackendSpec, prompt: str, params: DecodingParams, count: int) -> list[str]:
        headers = {"Content-Type": "application/json"}
        if backend.api_key_env:
            token = os.environ.get(backend.api_key_env, "")
            if not token:
                raise AuthError(f"environment variable {backend.api_key_env} is not set (backend {backend.endpoint})")
            headers["Authorization"] = f"Bearer {token}"
        if backend.native_n:
            return self._post(backend, prompt, params, count, headers)
        out: list[str] = []
        for _ in range(count):
            out.extend(self._post(backend, prompt, params, 1, headers))
        return out

    def _post(self, backend: BackendSpec, prompt: str, params: DecodingParams, n: int, headers: dict) -> list[str]:
        url = _chat_url(backend.endpoint)
        body = {
            "model": backend.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": n,
        }
        last_error = ""
        for attempt in range(self.max_attempts):
            with self._lock:
                self.network_requests += 1
            delay = min(self.backoff_cap, self.backoff_base * 2**attempt)
            try:
                resp = self.client.post(url, json=body, headers=headers, timeout=backend.timeout)
            except httpx.TransportError as err:
                last_error = f"{type(err).__name__}: {err}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"{url} rejected credentials (HTTP {resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                    retry_after = resp.headers.get("retry-after", "")
                    if retry_after.replace(".", "", 1).isdigit():
                        delay = min(self.backoff_cap, float(retry_after))
                elif resp.status_code >= 400:
                    raise BackendError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return _parse_choices(url, resp, n)
            if attempt + 1 < self.max_attempts:
                log.warning("request to %s failed (%s), retry %d/%d in %.2fs", url, last_error, attempt + 1, self.max_attempts - 1, delay)
                self._sleep(delay)
        raise BackendTransportError(f"{url} unreachable after {self.max_attempts} attempts ({last_error})")


def _parse_choices(url: str, resp: httpx.Response, n: int) -> list[str]:
    try:
        choices = sorted(resp.json()["choices"], key=lambda c: c.get("index", 0))
        texts = [c["message"].get("content") or "" for c in choices]
    except (ValueError, KeyError, TypeError, AttributeError) as err:
        raise BackendError(f"{url} returned a malformed chat completion ({err!r})") from None
    if len(texts) < n:
        raise BackendError(f"{url} returned {len(texts)} choices, expected {n}")
    return texts[:n]
