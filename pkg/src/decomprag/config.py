"""Pipeline configuration and its stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decomposition import DEFAULT_T_MAX
from .gateway import BackendSpec, DecodingParams

# Fields that change how a run executes but never what it produces.
OPERATIONAL_FIELDS = frozenset({"cache_dir", "concurrency", "index_dir", "runs_dir"})

DEFAULT_EVAL_LIMITS = {"hotpotqa": 500, "2wikimqa": 500, "musique": 500}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    n_samples: int = 5
    beta: float = 0.5
    k: int = 10
    t_max: int = DEFAULT_T_MAX
    sample_temperature: float = 1.0
    include_history: bool = True
    record_baseline_retrieval: bool = True
    reader_max_tokens: int = 64
    decompose_max_tokens: int = 256
    decomposer: BackendSpec | None = None
    reader: BackendSpec | None = None
    eval_limits: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EVAL_LIMITS))
    quotas: dict[str, int] = field(default_factory=dict)
    seed: int = 0
    sft_checkpoint: str = ""
    policy_prefix: str = "decomposer"
    sft_keep_all: bool = False
    cache_dir: str = ".decomprag-cache"
    index_dir: str = "index"
    runs_dir: str = "runs"
    concurrency: int = 8

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.t_max < 1:
            raise ConfigError("t_max must be positive")
        if self.sample_temperature < 0:
            raise ConfigError("sample_temperature must be non-negative")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be positive")

    @property
    def reader_params(self) -> DecodingParams:
        return DecodingParams(temperature=0.0, max_tokens=self.reader_max_tokens)

    @property
    def decompose_params(self) -> DecodingParams:
        return DecodingParams(temperature=0.0, max_tokens=self.decompose_max_tokens)

    def sample_params(self, n: int | None = None) -> DecodingParams:
        return DecodingParams(self.sample_temperature, self.decompose_max_tokens, n or self.n_samples)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, BackendSpec):
                value = value.to_dict()
            out[f.name] = value
        return out

    def digest(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in OPERATIONAL_FIELDS}
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> PipelineConfig:
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for role in ("decomposer", "reader"):
            if d.get(role) is not None:
                try:
                    d[role] = BackendSpec.from_dict(d[role], base_dir)
                except (TypeError, ValueError, KeyError, OSError) as err:
                    raise ConfigError(f"{role}: {err}") from None
        if base_dir is not None:
            for key in ("cache_dir", "index_dir", "runs_dir"):
                if key in d and not Path(d[key]).is_absolute():
                    d[key] = str(base_dir / d[key])
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data or {}, base_dir=path.parent.resolve())
