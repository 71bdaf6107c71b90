"""Answer normalization, EM / accuracy / F1, and the composite episode reward."""

from __future__ import annotations

import string
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .decomposition import FormatVerdict

ARTICLES = frozenset({"a", "an", "the"})
_ASCII_PUNCT = frozenset(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def _punct_table() -> dict[int, str]:
    return {cp: " " for cp in range(sys.maxunicode + 1) if _is_punct(chr(cp))}


_PUNCT_TO_SPACE = _punct_table()


def normalize_tokens(s: str) -> list[str]:
    text = s.lower().translate(_PUNCT_TO_SPACE)
    return [tok for tok in text.split() if tok not in ARTICLES]


def normalize_answer(s: str) -> str:
    """Lowercase, turn punctuation into spaces, drop articles, collapse whitespace."""
    return " ".join(normalize_tokens(s))


@dataclass(frozen=True)
class GoldAnswerSet:
    aliases: tuple[str, ...]

    def __post_init__(self):
        aliases = tuple(dict.fromkeys(self.aliases))
        if not aliases:
            raise ValueError("gold answer set needs at least one alias")
        for alias in aliases:
            if not normalize_tokens(alias):
                raise ValueError(f"gold alias {alias!r} is empty after normalization")
        object.__setattr__(self, "aliases", aliases)

    @classmethod
    def of(cls, *aliases: str) -> GoldAnswerSet:
        return cls(tuple(aliases))

    def __iter__(self):
        return iter(self.aliases)


def _as_gold(gold: GoldAnswerSet | Iterable[str] | str) -> GoldAnswerSet:
    if isinstance(gold, GoldAnswerSet):
        return gold
    if isinstance(gold, str):
        return GoldAnswerSet((gold,))
    return GoldAnswerSet(tuple(gold))


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    first = needle[0]
    for i in range(len(haystack) - n + 1):
        if haystack[i] == first and haystack[i : i + n] == needle:
            return True
    return False


def _f1_tokens(pred: list[str], gold: list[str]) -> float:
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def exact_match(pred: str, gold: GoldAnswerSet | Iterable[str] | str) -> int:
    p = normalize_tokens(pred)
    return int(any(p == normalize_tokens(a) for a in _as_gold(gold)))


def accuracy(pred: str, gold: GoldAnswerSet | Iterable[str] | str) -> int:
    """1 when some normalized alias occurs as a contiguous token run in the prediction."""
    p = normalize_tokens(pred)
    return int(any(_contains_run(p, normalize_tokens(a)) for a in _as_gold(gold)))


def f1_score(pred: str, gold: GoldAnswerSet | Iterable[str] | str) -> float:
    p = normalize_tokens(pred)
    return max(_f1_tokens(p, normalize_tokens(a)) for a in _as_gold(gold))


def token_contains(text: str, gold: GoldAnswerSet | Iterable[str] | str) -> bool:
    return bool(accuracy(text, gold))


@dataclass(frozen=True)
class RewardBreakdown:
    format_valid: bool
    em: int
    acc: int
    f1: float
    u: float

    def to_dict(self) -> dict:
        return {"format_valid": self.format_valid, "em": self.em, "acc": self.acc, "f1": self.f1, "u": self.u}

    @classmethod
    def from_dict(cls, d: dict) -> RewardBreakdown:
        return cls(bool(d["format_valid"]), int(d["em"]), int(d["acc"]), float(d["f1"]), float(d["u"]))


def score_episode(final_answer: str, gold: GoldAnswerSet | Iterable[str] | str, verdict: FormatVerdict) -> RewardBreakdown:
    """Reward = 0.5 * (EM + Acc) when the decomposition format is valid, else 0."""
    gold = _as_gold(gold)
    em = exact_match(final_answer, gold)
    acc = accuracy(final_answer, gold)
    f1 = f1_score(final_answer, gold)
    u = 0.5 * (em + acc) if verdict.valid else 0.0
    return RewardBreakdown(verdict.valid, em, acc, f1, u)
