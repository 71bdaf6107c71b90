"""Independent reference implementations used to check the package.

Each oracle is written differently from the code it checks: per-character
scans instead of translate tables, string search instead of token windows,
explicit loops instead of Counter arithmetic, arbitrary precision instead of
floats.
"""

from __future__ import annotations

import math
import re
import string
import unicodedata

import mpmath

mpmath.mp.dps = 60


# --- answer metrics ------------------------------------------------------------


def oracle_normalize(s: str) -> str:
    chars = []
    for ch in s.lower():
        if ch in string.punctuation or unicodedata.category(ch)[0] == "P":
            chars.append(" ")
        else:
            chars.append(ch)
    words = "".join(chars).split()
    return " ".join(w for w in words if w not in ("a", "an", "the"))


def oracle_em(pred: str, aliases) -> int:
    p = oracle_normalize(pred)
    return 1 if any(p == oracle_normalize(a) for a in aliases) else 0


def oracle_acc(pred: str, aliases) -> int:
    # normalized strings are single-space joined, so padded substring search
    # is contiguous token containment
    p = " " + oracle_normalize(pred) + " "
    return 1 if any((" " + oracle_normalize(a) + " ") in p for a in aliases) else 0


def oracle_f1(pred: str, aliases) -> float:
    best = 0.0
    p_tokens = oracle_normalize(pred).split()
    for alias in aliases:
        g_tokens = oracle_normalize(alias).split()
        remaining = list(g_tokens)
        overlap = 0
        for tok in p_tokens:
            if tok in remaining:
                remaining.remove(tok)
                overlap += 1
        if overlap == 0:
            continue
        precision = overlap / len(p_tokens)
        recall = overlap / len(g_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def oracle_reward(valid: bool, pred: str, aliases) -> float:
    if not valid:
        return 0.0
    return (oracle_em(pred, aliases) + oracle_acc(pred, aliases)) / 2


# --- lexical retrieval ---------------------------------------------------------


def oracle_bm25(docs: dict[str, str], query: str, k1: float = 0.9, b: float = 0.4) -> list[tuple[str, float]]:
    """Textbook formula evaluated one document at a time in high precision."""
    toks = {pid: re.findall(r"\w+", text.lower()) for pid, text in docs.items()}
    n = len(docs)
    avgdl = mpmath.mpf(sum(len(t) for t in toks.values())) / n
    q_terms = re.findall(r"\w+", query.lower())
    scores = {}
    for pid, d in toks.items():
        total = mpmath.mpf(0)
        for term in q_terms:
            df = sum(1 for other in toks.values() if term in other)
            tf = d.count(term)
            if tf == 0:
                continue
            idf = mpmath.log(1 + (n - df + mpmath.mpf("0.5")) / (df + mpmath.mpf("0.5")))
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(d) / avgdl))
        scores[pid] = float(total)
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


# --- objectives ----------------------------------------------------------------


def oracle_neg_log_sigmoid(x) -> mpmath.mpf:
    x = mpmath.mpf(x)
    return -mpmath.log(1 / (1 + mpmath.exp(-x)))


def oracle_sum(values) -> mpmath.mpf:
    total = mpmath.mpf(0)
    for v in values:
        total += mpmath.mpf(v)
    return total


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def isclose(a, b, tol) -> bool:
    return math.isclose(float(a), float(b), rel_tol=0, abs_tol=tol)
