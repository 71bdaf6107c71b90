"""Rejection-sampling SFT data, best/worst-of-N preference pairs, and round manifests."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig
from .decomposition import DecompositionError, parse_decomposition, serialize_decomposition
from .environment import EpisodeError, EpisodeTrace, QuestionInstance, run_episode
from .gateway import DEFAULT_PROMPTS, AuthError, BackendError, BackendSpec, Gateway, PromptBundle
from .jsonl import canonical_digest, write_json
from .retrieval import Corpus

log = logging.getLogger(__name__)

CANDIDATES_SCHEMA = "decomprag/candidate-set/v1"
MANIFEST_SCHEMA = "decomprag/round-manifest/v1"
SFT_THRESHOLD = 0.5


class MissingPredecessorError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Candidate:
    text: str
    trace: EpisodeTrace

    @property
    def reward(self) -> float:
        return self.trace.reward.u if self.trace.reward else 0.0


@dataclass(frozen=True)
class CandidateSet:
    question: QuestionInstance
    prompt: str
    candidates: tuple[Candidate, ...]
    error: str | None = None

    @property
    def rewards(self) -> list[float]:
        return [c.reward for c in self.candidates]

    def to_dict(self) -> dict:
        return {
            "schema": CANDIDATES_SCHEMA,
            "question": self.question.to_dict(),
            "prompt": self.prompt,
            "candidates": [{"text": c.text, "trace": c.trace.to_dict()} for c in self.candidates],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CandidateSet:
        if d.get("schema") != CANDIDATES_SCHEMA:
            raise ValueError(f"unsupported candidate-set schema {d.get('schema')!r}")
        return cls(
            question=QuestionInstance.from_dict(d["question"]),
            prompt=d["prompt"],
            candidates=tuple(Candidate(c["text"], EpisodeTrace.from_dict(c["trace"])) for c in d["candidates"]),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class SFTExample:
    question_id: str
    prompt: str
    target: str
    reward: float

    def __post_init__(self):
        if self.reward < SFT_THRESHOLD:
            raise ValueError(f"SFT example for {self.question_id} has reward {self.reward} < {SFT_THRESHOLD}")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "target": self.target, "reward": self.reward, "question_id": self.question_id}


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    prompt: str
    chosen: str
    rejected: str
    reward_gap: float
    round: int

    def __post_init__(self):
        if not self.reward_gap > 0:
            raise ValueError(f"preference pair for {self.question_id} has non-positive reward gap")

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "reward_gap": self.reward_gap,
            "round": self.round,
            "question_id": self.question_id,
        }


@dataclass
class SFTStats:
    questions: int = 0
    kept: int = 0
    dropped: int = 0
    histogram: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "questions": self.questions,
            "kept": self.kept,
            "dropped": self.dropped,
            "reward_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
        }


@dataclass
class PreferenceStats:
    questions: int = 0
    pairs: int = 0
    discarded: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"questions": self.questions, "pairs": self.pairs, "discarded": self.discarded, "skipped": self.skipped}


def canonical_target(text: str) -> str:
    """Re-emit a decomposition in canonical form; unparseable text is kept as generated."""
    try:
        return serialize_decomposition(parse_decomposition(text))
    except DecompositionError:
        return text.strip()


def _argmax(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def _argmin(values: Sequence[float]) -> int:
    worst = 0
    for i, v in enumerate(values):
        if v < values[worst]:
            worst = i
    return worst


def _usable(cs: CandidateSet) -> bool:
    return cs.error is None and bool(cs.candidates)


def build_sft(
    candidate_sets: Sequence[CandidateSet], keep_all: bool = False, threshold: float = SFT_THRESHOLD
) -> tuple[list[SFTExample], SFTStats]:
    """Keep the highest-reward decomposition per question when it reaches ``threshold``.

    Ties go to the earliest sample. ``keep_all`` instead admits every
    candidate at or above the threshold (ablation mode).
    """
    examples: list[SFTExample] = []
    stats = SFTStats()
    for cs in candidate_sets:
        if not _usable(cs):
            continue
        stats.questions += 1
        rewards = cs.rewards
        stats.histogram.update(rewards)
        if keep_all:
            picked = [i for i, r in enumerate(rewards) if r >= threshold]
        else:
            best = _argmax(rewards)
            picked = [best] if rewards[best] >= threshold else []
        if not picked:
            stats.dropped += 1
            continue
        stats.kept += 1
        for i in picked:
            c = cs.candidates[i]
            examples.append(SFTExample(cs.question.id, cs.prompt, canonical_target(c.text), rewards[i]))
    return examples, stats


def build_preferences(candidate_sets: Sequence[CandidateSet], round_index: int) -> tuple[list[PreferencePair], PreferenceStats]:
    """Best-of-N vs worst-of-N pairs; questions whose candidates all tie are discarded."""
    pairs: list[PreferencePair] = []
    stats = PreferenceStats()
    for cs in candidate_sets:
        if not _usable(cs):
            stats.skipped += 1
            continue
        if len(cs.candidates) < 2:
            raise ValueError(f"question {cs.question.id} has {len(cs.candidates)} candidate(s); need at least 2")
        stats.questions += 1
        rewards = cs.rewards
        hi, lo = _argmax(rewards), _argmin(rewards)
        if rewards[hi] == rewards[lo]:
            stats.discarded += 1
            continue
        pairs.append(
            PreferencePair(
                question_id=cs.question.id,
                prompt=cs.prompt,
                chosen=canonical_target(cs.candidates[hi].text),
                rejected=canonical_target(cs.candidates[lo].text),
                reward_gap=rewards[hi] - rewards[lo],
                round=round_index,
            )
        )
        stats.pairs += 1
    return pairs, stats


def sample_candidates(
    question: QuestionInstance,
    *,
    decomposer: BackendSpec,
    reader: BackendSpec,
    corpus: Corpus,
    config: PipelineConfig,
    gateway: Gateway,
    n: int | None = None,
    prompts: PromptBundle = DEFAULT_PROMPTS,
) -> CandidateSet:
    """Sample ``n`` decompositions and score each through the environment."""
    prompt = prompts.render_decompose(question.question)
    try:
        texts = gateway.complete(decomposer, prompt, config.sample_params(n))
        candidates = tuple(
            Candidate(
                text,
                run_episode(
                    question, text, reader=reader, corpus=corpus, config=config, gateway=gateway,
                    prompts=prompts, decomposer_id=decomposer.id,
                ),
            )
            for text in texts
        )
    except AuthError:
        raise
    except (BackendError, EpisodeError) as err:
        log.warning("sampling for %s failed: %s", question.id, err)
        return CandidateSet(question, prompt, (), error=str(err))
    return CandidateSet(question, prompt, candidates)


def sample_batch(
    questions: Sequence[QuestionInstance],
    *,
    decomposer: BackendSpec,
    reader: BackendSpec,
    corpus: Corpus,
    config: PipelineConfig,
    gateway: Gateway,
    n: int | None = None,
    prompts: PromptBundle = DEFAULT_PROMPTS,
) -> list[CandidateSet]:
    if not questions:
        return []

    def one(q: QuestionInstance) -> CandidateSet:
        return sample_candidates(
            q, decomposer=decomposer, reader=reader, corpus=corpus, config=config, gateway=gateway, n=n, prompts=prompts
        )

    with ThreadPoolExecutor(max_workers=min(config.concurrency, len(questions))) as pool:
        return list(pool.map(one, questions))


def round_dir(runs_dir: str | Path, round_index: int) -> Path:
    return Path(runs_dir) / f"round-{round_index}"


def manifest_digest(manifest: dict) -> str:
    return canonical_digest({k: v for k, v in manifest.items() if k != "digest"})


def load_manifest(runs_dir: str | Path, round_index: int) -> dict:
    path = round_dir(runs_dir, round_index) / "manifest.json"
    if not path.exists():
        raise MissingPredecessorError(f"round {round_index} manifest not found at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def reference_for_round(round_index: int, config: PipelineConfig) -> tuple[str, str | None]:
    """Policy that generates round ``round_index``'s candidates and serves as its DPO reference.

    Returns ``(model id, predecessor manifest digest)``.
    """
    if round_index < 0:
        raise ValueError("round index must be >= 0")
    if round_index == 0:
        if not config.sft_checkpoint:
            raise MissingPredecessorError("round 0 needs the warm-up SFT checkpoint id (config: sft_checkpoint)")
        return config.sft_checkpoint, None
    prev = load_manifest(config.runs_dir, round_index - 1)
    return prev["output_model"], prev["digest"]


def plan_round(
    round_index: int,
    config: PipelineConfig,
    *,
    dataset_digest: str,
    decomposer: BackendSpec,
    artifacts: dict[str, str] | None = None,
    write: bool = True,
) -> dict:
    """Build (and by default write) the manifest handed to the external trainer.

    The reference model for the DPO objective is the policy that generated
    this round's candidates: the SFT checkpoint at round 0, otherwise the
    previous round's output model.
    """
    reference, predecessor = reference_for_round(round_index, config)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "round": round_index,
        "reference_model": reference,
        "output_model": f"{config.policy_prefix}-round-{round_index}",
        "predecessor_digest": predecessor,
        "decomposer": {"id": decomposer.id, "endpoint": decomposer.endpoint, "model": decomposer.model},
        "n_samples": config.n_samples,
        "sample_temperature": config.sample_temperature,
        "reader_temperature": 0.0,
        "beta": config.beta,
        "k": config.k,
        "dataset_digest": dataset_digest,
        "config_digest": config.digest(),
        "artifacts": dict(sorted((artifacts or {}).items())),
    }
    manifest["digest"] = manifest_digest(manifest)
    if write:
        write_json(round_dir(config.runs_dir, round_index) / "manifest.json", manifest)
    return manifest
