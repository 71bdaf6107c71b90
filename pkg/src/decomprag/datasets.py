"""Dataset adapters: published multi-hop QA file shapes to QuestionInstance records.

Records that cannot be used are never dropped silently; each one is listed
in the returned :class:`LoadReport`.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .environment import QuestionInstance
from .jsonl import canonical_digest, file_digest
from .metrics import GoldAnswerSet

TAGS = ("hotpotqa", "2wikimqa", "musique", "strategyqa", "bamboogle", "custom")
_NAME_HINTS = (("2wiki", "2wikimqa"), ("hotpot", "hotpotqa"), ("musique", "musique"),
               ("strategyqa", "strategyqa"), ("bamboogle", "bamboogle"))
YES_ALIASES = ("yes", "true")
NO_ALIASES = ("no", "false")


class DatasetError(ValueError):
    pass


@dataclass
class LoadReport:
    path: str
    tag: str
    digest: str
    records: int = 0
    loaded: int = 0
    dropped: list[tuple[int, str]] = field(default_factory=list)
    truncated: int = 0

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "tag": self.tag,
            "sha256": self.digest,
            "records": self.records,
            "loaded": self.loaded,
            "dropped": [{"record": i, "reason": r} for i, r in self.dropped],
            "truncated": self.truncated,
        }


def _read_records(path: Path) -> list[dict]:
    suffix = path.suffix.lower()
    if suffix in (".csv", ".tsv"):
        with open(path, encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f, delimiter="\t" if suffix == ".tsv" else ","))
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        data = json.loads(text)
    elif stripped.startswith("{") and suffix == ".json":
        obj = json.loads(text)
        data = obj.get("data", obj.get("questions")) if isinstance(obj, dict) else None
        if data is None:
            raise DatasetError(f"{path}: JSON object without a 'data' or 'questions' list")
    else:
        data = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                data.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}:{line_no}: invalid JSON ({err.msg})") from None
    if not isinstance(data, list):
        raise DatasetError(f"{path}: expected a list of records")
    return data


def _first(rec: dict, *keys):
    for k in keys:
        if k in rec and rec[k] not in (None, ""):
            return rec[k]
    # header case varies between Bamboogle exports
    lowered = {str(k).lower(): v for k, v in rec.items()}
    for k in keys:
        v = lowered.get(k.lower())
        if v not in (None, ""):
            return v
    return None


def _boolean_aliases(value) -> tuple[str, ...] | None:
    if isinstance(value, bool):
        return YES_ALIASES if value else NO_ALIASES
    if isinstance(value, str) and value.strip().lower() in YES_ALIASES + NO_ALIASES:
        return YES_ALIASES if value.strip().lower() in YES_ALIASES else NO_ALIASES
    return None


def _aliases(rec: dict, tag: str) -> tuple[str, ...]:
    answer = _first(rec, "answer", "answers", "gold", "golds", "Answer")
    if tag == "strategyqa":
        mapped = _boolean_aliases(answer)
        if mapped is None:
            raise DatasetError(f"strategyqa answer must be boolean, got {answer!r}")
        return mapped
    aliases: list[str] = []
    if isinstance(answer, list):
        aliases.extend(str(a) for a in answer)
    elif answer is not None:
        if isinstance(answer, bool):
            return _boolean_aliases(answer)
        aliases.append(str(answer))
    extra = rec.get("answer_aliases") or rec.get("aliases") or []
    aliases.extend(str(a) for a in extra)
    return tuple(aliases)


def to_question(rec: dict, tag: str, index: int) -> QuestionInstance:
    if not isinstance(rec, dict):
        raise DatasetError("record is not an object")
    qid = _first(rec, "id", "_id", "qid", "question_id")
    question = _first(rec, "question", "Question")
    if question is None or not str(question).strip():
        raise DatasetError("missing question")
    gold = GoldAnswerSet(_aliases(rec, tag))
    return QuestionInstance(str(qid) if qid is not None else f"{tag}-{index}", str(question), gold, tag)


def load_dataset(path: str | Path, tag: str = "custom", limit: int | None = None) -> tuple[list[QuestionInstance], LoadReport]:
    """Read a dataset file; ``limit`` keeps the first ``limit`` usable questions."""
    if tag not in TAGS:
        raise DatasetError(f"unknown dataset tag {tag!r}; expected one of {', '.join(TAGS)}")
    path = Path(path)
    records = _read_records(path)
    report = LoadReport(str(path), tag, file_digest(path), records=len(records))
    questions: list[QuestionInstance] = []
    seen: set[str] = set()
    for i, rec in enumerate(records):
        try:
            q = to_question(rec, tag, i)
        except (DatasetError, ValueError) as err:
            report.dropped.append((i, str(err)))
            continue
        if q.id in seen:
            report.dropped.append((i, f"duplicate id {q.id!r}"))
            continue
        seen.add(q.id)
        questions.append(q)
    if limit is not None and len(questions) > limit:
        report.truncated = len(questions) - limit
        questions = questions[:limit]
    report.loaded = len(questions)
    return questions, report


def parse_dataset_arg(arg: str) -> tuple[str, Path]:
    """``tag=path`` or a bare path (tag inferred from the file name, else ``custom``)."""
    if "=" in arg:
        tag, _, path = arg.partition("=")
        return tag.strip(), Path(path)
    path = Path(arg)
    name = path.name.lower().replace("_", "").replace("-", "")
    for hint, tag in _NAME_HINTS:
        if hint in name:
            return tag, path
    return "custom", path


def apply_quotas(questions: Iterable[QuestionInstance], quotas: dict[str, int], seed: int) -> list[QuestionInstance]:
    """Seeded per-source subsample; sources without a quota pass through whole."""
    by_source: dict[str, list[QuestionInstance]] = {}
    for q in questions:
        by_source.setdefault(q.dataset, []).append(q)
    out: list[QuestionInstance] = []
    for source, items in by_source.items():
        quota = quotas.get(source)
        if quota is None or quota >= len(items):
            out.extend(items)
            continue
        rng = random.Random(f"{seed}:{source}")
        keep = set(rng.sample(range(len(items)), quota))
        out.extend(q for i, q in enumerate(items) if i in keep)
    return out


def dataset_digest(questions: Iterable[QuestionInstance]) -> str:
    return canonical_digest([q.to_dict() for q in questions])
