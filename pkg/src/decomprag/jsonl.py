"""JSON-lines reading/writing, content digests and sidecar metadata files."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator


class JSONLError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def canonical_digest(obj) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise JSONLError(path, line_no, f"invalid JSON ({err.msg})") from None
            if not isinstance(obj, dict):
                raise JSONLError(path, line_no, "expected a JSON object")
            yield line_no, obj


def read_jsonl(path: str | Path) -> list[dict]:
    return [obj for _, obj in iter_jsonl(path)]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> Path:
    path = Path(path)
    _atomic_write(path, "".join(dumps(r) + "\n" for r in records))
    return path


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    _atomic_write(path, json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n")
    return path


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_sidecar(path: str | Path, kind: str, config_digest: str, **extra) -> Path:
    meta = {"kind": kind, "config_digest": config_digest, "file_sha256": file_digest(path), **extra}
    return write_json(sidecar_path(path), meta)


def read_sidecar(path: str | Path) -> dict | None:
    p = sidecar_path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))
