"""Content-addressed, on-disk cache for model responses.

One JSON document per key at ``<root>/<key[:2]>/<key>.json``. Writes go
through a temp file and ``os.replace`` so concurrent readers never see a
partial entry.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import threading
from datetime import datetime, timezone
from pathlib import Path

KEY_VERSION = "v1"


class CacheCorruptionError(RuntimeError):
    def __init__(self, path: Path, reason: str):
        super().__init__(f"corrupt cache entry {path}: {reason}")
        self.path = path


def cache_key(kind: str, model: str, prompt: str, temperature: float, max_tokens: int, sample_index: int) -> str:
    payload = json.dumps(
        [KEY_VERSION, kind, model, prompt, float(temperature), int(max_tokens), int(sample_index)],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ResponseCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._write_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            self.misses += 1
            return None
        try:
            entry = json.loads(raw)
        except json.JSONDecodeError as err:
            raise CacheCorruptionError(path, f"invalid JSON ({err.msg})") from None
        if not isinstance(entry, dict) or entry.get("key") != key or not isinstance(entry.get("response"), str):
            raise CacheCorruptionError(path, "entry does not match its key or lacks a response")
        self.hits += 1
        return entry

    def put(self, key: str, request: dict, response: str) -> dict:
        entry = {"key": key, "request": request, "response": response, "created": utc_now()}
        path = self.path_for(key)
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(entry, f, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        return entry

    def keys(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.stem for p in self.root.glob("*/*.json") if not p.name.startswith(".tmp-"))

    def stats(self) -> dict:
        files = [p for p in self.root.glob("*/*.json")] if self.root.exists() else []
        return {"root": str(self.root), "entries": len(files), "bytes": sum(p.stat().st_size for p in files)}

    def clear(self) -> int:
        n = len(self.keys())
        if self.root.exists():
            for child in self.root.iterdir():
                if child.is_dir():
                    shutil.rmtree(child)
        return n
