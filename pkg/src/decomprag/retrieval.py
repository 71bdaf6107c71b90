"""Passage corpus, top-k retrieval, and passage-level answer recall."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .metrics import GoldAnswerSet, token_contains

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
_TOKEN = re.compile(r"\w+", re.UNICODE)


class CorpusError(ValueError):
    pass


class DuplicatePassageError(CorpusError):
    def __init__(self, passage_id: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate passage id {passage_id!r}{where}")
        self.passage_id = passage_id


class MalformedRecordError(CorpusError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    body: str

    def __post_init__(self):
        if not self.body.strip():
            raise ValueError(f"passage {self.id!r} has an empty body")


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    hits: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.hits]


@dataclass(frozen=True)
class IngestStats:
    passages: int
    tokens: int
    digest: str


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class Scorer(Protocol):
    """Scores every passage of a corpus against a query."""

    name: str

    def fit(self, passages: Sequence[Passage]) -> None: ...

    def scores(self, query: str) -> np.ndarray: ...

    def params(self) -> dict: ...


class BM25Scorer:
    """Okapi BM25 over title + body, Lucene-style non-negative idf.

    Repeated query terms contribute once per occurrence.
    """

    name = "bm25"

    def __init__(self, k1: float = 0.9, b: float = 0.4):
        self.k1 = k1
        self.b = b
        self._postings: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._doc_len = np.zeros(0)
        self._avgdl = 0.0
        self.token_count = 0

    def params(self) -> dict:
        return {"name": self.name, "k1": self.k1, "b": self.b}

    def fit(self, passages: Sequence[Passage]) -> None:
        postings: dict[str, dict[int, int]] = {}
        lengths = np.zeros(len(passages), dtype=np.float64)
        for i, p in enumerate(passages):
            toks = tokenize(f"{p.title} {p.body}")
            lengths[i] = len(toks)
            for tok in toks:
                row = postings.setdefault(tok, {})
                row[i] = row.get(i, 0) + 1
        self._postings = {
            term: (np.fromiter(row.keys(), dtype=np.int64), np.fromiter(row.values(), dtype=np.float64))
            for term, row in postings.items()
        }
        self._doc_len = lengths
        self.token_count = int(lengths.sum())
        self._avgdl = float(lengths.mean()) if len(lengths) else 0.0

    def idf(self, term: str) -> float:
        n = len(self._doc_len)
        df = len(self._postings[term][0]) if term in self._postings else 0
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> np.ndarray:
        out = np.zeros(len(self._doc_len), dtype=np.float64)
        if self._avgdl == 0.0:
            return out
        norm = self.k1 * (1.0 - self.b + self.b * self._doc_len / self._avgdl)
        for term in tokenize(query):
            if term not in self._postings:
                continue
            docs, tf = self._postings[term]
            out[docs] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[docs])
        return out


class EmbeddingScorer:
    """Cosine similarity between query and passage embeddings from an external encoder.

    ``embed`` maps a list of texts to a 2-d array; passage vectors are
    computed once at fit time in batches.
    """

    name = "embedding"

    def __init__(self, embed: Callable[[list[str]], np.ndarray], model: str = "", batch_size: int = 64):
        self.embed = embed
        self.model = model
        self.batch_size = batch_size
        self._matrix = np.zeros((0, 0))

    def params(self) -> dict:
        return {"name": self.name, "model": self.model}

    @staticmethod
    def _unit(m: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(m, axis=-1, keepdims=True)
        return m / np.where(norms == 0, 1.0, norms)

    def fit(self, passages: Sequence[Passage]) -> None:
        texts = [f"{p.title}\n{p.body}" if p.title else p.body for p in passages]
        chunks = [
            np.asarray(self.embed(texts[i : i + self.batch_size]), dtype=np.float64)
            for i in range(0, len(texts), self.batch_size)
        ]
        self._matrix = self._unit(np.vstack(chunks)) if chunks else np.zeros((0, 0))

    def scores(self, query: str) -> np.ndarray:
        if self._matrix.size == 0:
            return np.zeros(len(self._matrix))
        q = self._unit(np.asarray(self.embed([query]), dtype=np.float64)[0])
        return self._matrix @ q


def openai_embedder(endpoint: str, model: str, api_key: str | None = None, timeout: float = 60.0):
    """Embedding function backed by an OpenAI-compatible ``/embeddings`` route."""
    headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
    url = endpoint.rstrip("/") + "/embeddings"

    def embed(texts: list[str]) -> np.ndarray:
        resp = httpx.post(url, json={"model": model, "input": texts}, headers=headers, timeout=timeout)
        resp.raise_for_status()
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        return np.array([d["embedding"] for d in data], dtype=np.float64)

    return embed


def _record_digest(passages: Sequence[Passage]) -> str:
    h = hashlib.sha256()
    for p in passages:
        h.update(json.dumps([p.id, p.title, p.body], ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


class Corpus:
    """Immutable passage collection with a fitted scorer.

    Safe for concurrent ``retrieve`` calls once constructed.
    """

    def __init__(self, passages: Sequence[Passage], scorer: Scorer | None = None):
        self.passages: tuple[Passage, ...] = tuple(passages)
        self._by_id: dict[str, int] = {}
        for i, p in enumerate(self.passages):
            if p.id in self._by_id:
                raise DuplicatePassageError(p.id)
            self._by_id[p.id] = i
        self.scorer = scorer if scorer is not None else BM25Scorer()
        self.scorer.fit(self.passages)
        # ascending-id rank used as the secondary sort key
        order = sorted(range(len(self.passages)), key=lambda i: self.passages[i].id)
        self._id_rank = np.empty(len(self.passages), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.passages))
        self.digest = _record_digest(self.passages)

    def __len__(self) -> int:
        return len(self.passages)

    def __getitem__(self, passage_id: str) -> Passage:
        return self.passages[self._by_id[passage_id]]

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._by_id

    @property
    def token_count(self) -> int:
        return sum(len(tokenize(f"{p.title} {p.body}")) for p in self.passages)

    def stats(self) -> IngestStats:
        return IngestStats(len(self.passages), self.token_count, self.digest)

    def retrieve(self, query: str, k: int) -> RetrievalResult:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not query.strip():
            raise ValueError("empty query")
        scores = self.scorer.scores(query)
        order = np.lexsort((self._id_rank, -scores))[:k]
        hits = tuple((self.passages[i].id, float(scores[i])) for i in order)
        return RetrievalResult(query, hits)

    def manifest(self) -> dict:
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "corpus_digest": self.digest,
            "passages": len(self.passages),
            "tokens": self.token_count,
            "scorer": self.scorer.params(),
        }

    def save(self, index_dir: str | Path) -> Path:
        index_dir = Path(index_dir)
        index_dir.mkdir(parents=True, exist_ok=True)
        with open(index_dir / "passages.jsonl", "w", encoding="utf-8") as f:
            for p in self.passages:
                f.write(json.dumps({"id": p.id, "title": p.title, "text": p.body}, ensure_ascii=False) + "\n")
        (index_dir / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return index_dir

    @classmethod
    def load(cls, index_dir: str | Path, scorer: Scorer | None = None) -> Corpus:
        index_dir = Path(index_dir)
        manifest_path = index_dir / "manifest.json"
        if not manifest_path.exists():
            raise CorpusError(f"no index manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != INDEX_FORMAT_VERSION:
            raise CorpusError(f"unsupported index format {manifest.get('format_version')!r} in {index_dir}")
        if scorer is None:
            params = dict(manifest["scorer"])
            if params.pop("name") != BM25Scorer.name:
                raise CorpusError("index was built with a non-lexical scorer; pass the scorer explicitly")
            scorer = BM25Scorer(**params)
        with open(index_dir / "passages.jsonl", encoding="utf-8") as f:
            corpus, _ = ingest_corpus(f, scorer=scorer)
        if corpus.digest != manifest["corpus_digest"]:
            raise CorpusError(f"corpus digest mismatch in {index_dir}: index content changed since it was built")
        return corpus


def _parse_record(line_no: int, line: str) -> Passage:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise MalformedRecordError(line_no, f"invalid JSON ({err.msg})") from None
    if not isinstance(obj, dict):
        raise MalformedRecordError(line_no, "record is not a JSON object")
    pid = obj.get("id")
    if isinstance(pid, bool) or not isinstance(pid, (str, int)) or str(pid) == "":
        raise MalformedRecordError(line_no, "missing or invalid 'id'")
    text = obj.get("text")
    if not isinstance(text, str) or not text.strip():
        raise MalformedRecordError(line_no, "missing or empty 'text'")
    title = obj.get("title", "")
    if title is None:
        title = ""
    if not isinstance(title, str):
        raise MalformedRecordError(line_no, "'title' must be a string")
    return Passage(str(pid), title, text)


def ingest_corpus(
    source: Iterable[str] | Iterable[Passage], scorer: Scorer | None = None
) -> tuple[Corpus, IngestStats]:
    """Build a corpus from JSON-lines text (``id``, ``title``, ``text``) or Passage objects."""
    passages: list[Passage] = []
    seen: set[str] = set()
    for line_no, item in enumerate(source, start=1):
        if isinstance(item, Passage):
            p = item
        else:
            if not item.strip():
                continue
            p = _parse_record(line_no, item)
        if p.id in seen:
            raise DuplicatePassageError(p.id, line_no)
        seen.add(p.id)
        passages.append(p)
    corpus = Corpus(passages, scorer)
    stats = corpus.stats()
    log.info("ingested %d passages (%d tokens), digest %s", stats.passages, stats.tokens, stats.digest[:12])
    return corpus, stats


SINGLE_QUERY = "single-query"
DECOMPOSED_UNION = "decomposed-union"


@dataclass(frozen=True)
class RecallReport:
    mode: str
    recalled: int
    total: int

    @property
    def recall(self) -> float | None:
        return self.recalled / self.total if self.total else None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "recalled": self.recalled, "total": self.total, "recall": self.recall}


def answer_recall(
    corpus: Corpus,
    episodes: Sequence,
    gold: Mapping[str, GoldAnswerSet],
    mode: str = DECOMPOSED_UNION,
) -> RecallReport:
    """Fraction of questions whose retrieved passages contain a gold alias.

    ``episodes`` are :class:`~decomprag.environment.EpisodeTrace` objects;
    single-query mode reads each trace's retrieval for the original question.
    """
    if mode not in (SINGLE_QUERY, DECOMPOSED_UNION):
        raise ValueError(f"unknown recall mode {mode!r}")
    recalled = 0
    for ep in episodes:
        if mode == SINGLE_QUERY:
            ids = [pid for pid, _ in ep.baseline_hits]
        else:
            ids = [pid for step in ep.steps for pid, _ in step.hits]
        answers = gold[ep.question_id]
        if any(token_contains(corpus[pid].body, answers) for pid in dict.fromkeys(ids)):
            recalled += 1
    return RecallReport(mode, recalled, len(episodes))
