"""Model access: prompt templates, backends, and the response cache."""

from __future__ import annotations

from . import cache as _cache
from .backends import (
    REMOTE_CHAT,
    SCRIPTED,
    AuthError,
    BackendError,
    BackendSpec,
    BackendTransportError,
    DecodingParams,
    Gateway,
    ScriptMissError,
    ScriptTable,
    prompt_digest,
)
from .cache import CacheCorruptionError, ResponseCache
from .prompts import (
    DEFAULT_PROMPTS,
    PromptBundle,
    PromptError,
    format_context,
    format_qa_block,
    render_decompose_prompt,
    render_final_prompt,
    render_subanswer_prompt,
)


def cache_key(backend: BackendSpec, prompt: str, params: DecodingParams, sample_index: int) -> str:
    return _cache.cache_key(backend.kind, backend.cache_model, prompt, params.temperature, params.max_tokens, sample_index)


__all__ = [
    "REMOTE_CHAT",
    "SCRIPTED",
    "AuthError",
    "BackendError",
    "BackendSpec",
    "BackendTransportError",
    "CacheCorruptionError",
    "DEFAULT_PROMPTS",
    "DecodingParams",
    "Gateway",
    "PromptBundle",
    "PromptError",
    "ResponseCache",
    "ScriptMissError",
    "ScriptTable",
    "cache_key",
    "format_context",
    "format_qa_block",
    "prompt_digest",
    "render_decompose_prompt",
    "render_final_prompt",
    "render_subanswer_prompt",
]
