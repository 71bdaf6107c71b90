"""Retrieval + reader environment that executes a decomposition and scores it."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .config import PipelineConfig
from .decomposition import (
    Decomposition,
    FormatVerdict,
    UnresolvedReferenceError,
    resolve_step,
    verify_text,
)
from .gateway import DEFAULT_PROMPTS, AuthError, BackendError, BackendSpec, Gateway, PromptBundle
from .metrics import GoldAnswerSet, RewardBreakdown, accuracy, exact_match, f1_score, score_episode
from .retrieval import Corpus, RetrievalResult

log = logging.getLogger(__name__)

TRACE_SCHEMA = "decomprag/episode-trace/v1"
STATUS_OK = "ok"
STATUS_ERROR = "error"


class EpisodeError(RuntimeError):
    """A backend failure aborted an episode; completed calls remain cached."""

    def __init__(self, question_id: str, cause: BaseException):
        super().__init__(f"episode {question_id} aborted: {cause}")
        self.question_id = question_id
        self.cause = cause


class MissingGoldError(KeyError):
    pass


@dataclass(frozen=True)
class QuestionInstance:
    id: str
    question: str
    gold: GoldAnswerSet
    dataset: str = "custom"

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError(f"question {self.id!r} is empty")

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "gold": list(self.gold.aliases), "dataset": self.dataset}

    @classmethod
    def from_dict(cls, d: dict) -> QuestionInstance:
        return cls(str(d["id"]), d["question"], GoldAnswerSet(tuple(d["gold"])), d.get("dataset", "custom"))


@dataclass(frozen=True)
class StepRecord:
    index: int
    template: str
    question: str
    hits: tuple[tuple[str, float], ...]
    answer: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "template": self.template,
            "question": self.question,
            "hits": [[pid, score] for pid, score in self.hits],
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> StepRecord:
        return cls(d["index"], d["template"], d["question"], tuple((pid, float(s)) for pid, s in d["hits"]), d["answer"])


@dataclass(frozen=True)
class EpisodeTrace:
    question_id: str
    dataset: str
    question: str
    decomposition_text: str
    format: FormatVerdict | None
    steps: tuple[StepRecord, ...]
    final_answer: str
    reward: RewardBreakdown | None
    gold: tuple[str, ...] = ()
    reader_calls: int = 0
    baseline_hits: tuple[tuple[str, float], ...] = ()
    provenance: dict = field(default_factory=dict)
    status: str = STATUS_OK
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    @property
    def decomposition(self) -> Decomposition | None:
        d, _ = verify_text(self.decomposition_text, self.provenance.get("t_max", 8))
        return d

    def to_dict(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "question_id": self.question_id,
            "dataset": self.dataset,
            "question": self.question,
            "decomposition_text": self.decomposition_text,
            "format": self.format.to_dict() if self.format else None,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "reward": self.reward.to_dict() if self.reward else None,
            "gold": list(self.gold),
            "reader_calls": self.reader_calls,
            "baseline_hits": [[pid, score] for pid, score in self.baseline_hits],
            "provenance": self.provenance,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EpisodeTrace:
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {d.get('schema')!r}")
        fmt = d.get("format")
        reward = d.get("reward")
        return cls(
            question_id=d["question_id"],
            dataset=d["dataset"],
            question=d["question"],
            decomposition_text=d["decomposition_text"],
            format=FormatVerdict(fmt["valid"], tuple(fmt["violations"])) if fmt else None,
            steps=tuple(StepRecord.from_dict(s) for s in d["steps"]),
            final_answer=d["final_answer"],
            reward=RewardBreakdown.from_dict(reward) if reward else None,
            gold=tuple(d.get("gold", ())),
            reader_calls=d.get("reader_calls", 0),
            baseline_hits=tuple((pid, float(s)) for pid, s in d.get("baseline_hits", [])),
            provenance=d.get("provenance", {}),
            status=d.get("status", STATUS_OK),
            error=d.get("error"),
        )


def error_trace(question: QuestionInstance, err: BaseException, raw: str = "", provenance: dict | None = None) -> EpisodeTrace:
    return EpisodeTrace(
        question_id=question.id,
        dataset=question.dataset,
        question=question.question,
        decomposition_text=raw,
        format=None,
        steps=(),
        final_answer="",
        reward=None,
        gold=question.gold.aliases,
        provenance=provenance or {},
        status=STATUS_ERROR,
        error=str(err),
    )


def run_episode(
    question: QuestionInstance,
    raw_decomposition: str,
    *,
    reader: BackendSpec,
    corpus: Corpus,
    config: PipelineConfig,
    gateway: Gateway,
    prompts: PromptBundle = DEFAULT_PROMPTS,
    decomposer_id: str = "",
) -> EpisodeTrace:
    """Execute one decomposition step by step and score the final answer.

    Raises :class:`EpisodeError` when the reader backend fails.
    """
    decomposition, verdict = verify_text(raw_decomposition, config.t_max)
    baseline = corpus.retrieve(question.question, config.k).hits if config.record_baseline_retrieval else ()
    created: list[str] = []
    steps: list[StepRecord] = []
    final_answer = ""
    calls = 0

    def ask(prompt: str) -> str:
        nonlocal calls
        calls += 1
        try:
            entry = gateway.complete_entries(reader, prompt, config.reader_params)[0]
        except AuthError:
            raise
        except BackendError as err:
            raise EpisodeError(question.id, err) from err
        created.append(entry["created"])
        return entry["response"].strip()

    if verdict.valid:
        answers: list[str] = []
        for step in decomposition.steps:
            try:
                resolved = resolve_step(step, answers)
            except UnresolvedReferenceError as err:
                raise AssertionError(f"format-valid decomposition left a reference unresolved: {err}") from err
            # an empty prior answer can leave nothing to search for
            result = corpus.retrieve(resolved, config.k) if resolved.strip() else RetrievalResult(resolved, ())
            history = [(s.question, s.answer) for s in steps] if config.include_history else []
            prompt = prompts.render_subanswer(resolved, [corpus[pid] for pid in result.ids], history)
            answer = ask(prompt)
            answers.append(answer)
            steps.append(StepRecord(step.index, step.template, resolved, result.hits, answer))
        final_answer = ask(prompts.render_final(question.question, [(s.question, s.answer) for s in steps]))

    provenance = {
        "decomposer": decomposer_id,
        "reader": reader.id,
        "config_digest": config.digest(),
        "t_max": config.t_max,
        "first_response_at": min(created) if created else None,
        "last_response_at": max(created) if created else None,
    }
    return EpisodeTrace(
        question_id=question.id,
        dataset=question.dataset,
        question=question.question,
        decomposition_text=raw_decomposition,
        format=verdict,
        steps=tuple(steps),
        final_answer=final_answer,
        reward=score_episode(final_answer, question.gold, verdict),
        gold=question.gold.aliases,
        reader_calls=calls,
        baseline_hits=baseline,
        provenance=provenance,
    )


def decompose(
    question: QuestionInstance, *, decomposer: BackendSpec, config: PipelineConfig, gateway: Gateway,
    prompts: PromptBundle = DEFAULT_PROMPTS,
) -> str:
    """One greedy decomposition from the decomposer backend."""
    return gateway.complete(decomposer, prompts.render_decompose(question.question), config.decompose_params)[0]


def run_batch(
    questions: Sequence[QuestionInstance],
    *,
    decomposer: BackendSpec,
    reader: BackendSpec,
    corpus: Corpus,
    config: PipelineConfig,
    gateway: Gateway,
    prompts: PromptBundle = DEFAULT_PROMPTS,
) -> list[EpisodeTrace]:
    """Decompose and run every question; failures become error traces, order is preserved.

    Authentication errors are fatal and propagate.
    """

    def one(q: QuestionInstance) -> EpisodeTrace:
        raw = ""
        try:
            raw = decompose(q, decomposer=decomposer, config=config, gateway=gateway, prompts=prompts)
            return run_episode(
                q, raw, reader=reader, corpus=corpus, config=config, gateway=gateway,
                prompts=prompts, decomposer_id=decomposer.id,
            )
        except AuthError:
            raise
        except (BackendError, EpisodeError) as err:
            log.warning("question %s failed: %s", q.id, err)
            return error_trace(q, err, raw, {"decomposer": decomposer.id, "reader": reader.id, "config_digest": config.digest()})

    if not questions:
        return []
    with ThreadPoolExecutor(max_workers=min(config.concurrency, len(questions))) as pool:
        return list(pool.map(one, questions))


def rescore(trace: EpisodeTrace, gold: GoldAnswerSet | None = None) -> RewardBreakdown:
    """Recompute the reward from the trace's own decomposition text and final answer."""
    _, verdict = verify_text(trace.decomposition_text, trace.provenance.get("t_max", 8))
    return score_episode(trace.final_answer, gold if gold is not None else GoldAnswerSet(trace.gold), verdict)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _summary(traces: list[EpisodeTrace], golds: Mapping[str, GoldAnswerSet]) -> dict:
    scored = [t for t in traces if t.ok]
    em, acc, f1, u = [], [], [], []
    for t in scored:
        gold = golds[t.question_id]
        em.append(exact_match(t.final_answer, gold))
        acc.append(accuracy(t.final_answer, gold))
        f1.append(f1_score(t.final_answer, gold))
        u.append(t.reward.u if t.reward else 0.0)
    return {
        "n": len(scored),
        "em": _mean(em),
        "acc": _mean(acc),
        "f1": _mean(f1),
        "u": _mean(u),
        "format_invalid": sum(1 for t in scored if t.format is not None and not t.format.valid),
        "errors": len(traces) - len(scored),
    }


def evaluate(traces: Sequence[EpisodeTrace], golds: Mapping[str, GoldAnswerSet]) -> dict:
    """Mean EM / Acc / F1 overall and per dataset tag.

    Error traces are counted but excluded from the means; a group with no
    scored traces reports ``None`` metrics.
    """
    for t in traces:
        if t.question_id not in golds:
            raise MissingGoldError(f"no gold answer for question {t.question_id!r}")
    by_dataset: dict[str, list[EpisodeTrace]] = {}
    for t in traces:
        by_dataset.setdefault(t.dataset, []).append(t)
    return {
        "overall": _summary(list(traces), golds),
        "datasets": {name: _summary(group, golds) for name, group in sorted(by_dataset.items())},
    }
