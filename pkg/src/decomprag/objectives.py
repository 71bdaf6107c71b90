"""SFT and DPO losses computed from per-token log-probabilities.

No autograd here: these functions evaluate the training objectives on
log-probabilities scored by an external engine, so the emitted datasets and
the trainer's reported losses can be cross-checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLogProbTrace:
    logprobs: tuple[float, ...]
    tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(self.tokens))
            if len(self.tokens) != len(self.logprobs):
                raise ObjectiveError(f"{len(self.tokens)} tokens but {len(self.logprobs)} logprobs")
        for lp in self.logprobs:
            if not lp <= 0.0:
                raise ObjectiveError(f"log-probability must be <= 0, got {lp}")

    @property
    def total(self) -> float:
        return math.fsum(self.logprobs)

    def __len__(self) -> int:
        return len(self.logprobs)


@dataclass(frozen=True)
class PairLogProbs:
    chosen_policy: TokenLogProbTrace
    chosen_reference: TokenLogProbTrace
    rejected_policy: TokenLogProbTrace
    rejected_reference: TokenLogProbTrace

    def __post_init__(self):
        for side, pol, ref in (
            ("chosen", self.chosen_policy, self.chosen_reference),
            ("rejected", self.rejected_policy, self.rejected_reference),
        ):
            if len(pol) != len(ref):
                raise ObjectiveError(f"{side}: policy and reference score different token counts")
            if pol.tokens is not None and ref.tokens is not None and pol.tokens != ref.tokens:
                raise ObjectiveError(f"{side}: policy and reference score different token sequences")

    @property
    def chosen_log_ratio(self) -> float:
        return self.chosen_policy.total - self.chosen_reference.total

    @property
    def rejected_log_ratio(self) -> float:
        return self.rejected_policy.total - self.rejected_reference.total


def log_sigmoid(x: float) -> float:
    # log σ(x) = -softplus(-x), arranged so exp never sees a positive argument
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sft_loss(traces: Sequence[TokenLogProbTrace]) -> float:
    """Mean over examples of the summed negative token log-likelihood."""
    if not traces:
        raise ObjectiveError("sft_loss needs at least one trace")
    return math.fsum(-t.total for t in traces) / len(traces)


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ObjectiveError(f"beta must be positive, got {beta}")


def implicit_reward_margin(pair: PairLogProbs, beta: float) -> float:
    _check_beta(beta)
    return beta * (pair.chosen_log_ratio - pair.rejected_log_ratio)


def dpo_loss(pairs: Sequence[PairLogProbs], beta: float = 0.5) -> float:
    """Mean of -log σ(β·(Δchosen − Δrejected)) where Δ is the policy/reference log-ratio."""
    _check_beta(beta)
    if not pairs:
        raise ObjectiveError("dpo_loss needs at least one pair")
    return math.fsum(-log_sigmoid(implicit_reward_margin(p, beta)) for p in pairs) / len(pairs)


def dpo_grad_wrt_chosen_token(pairs: Sequence[PairLogProbs], index: int, beta: float = 0.5) -> float:
    """Analytic derivative of :func:`dpo_loss` w.r.t. any chosen-policy token logprob of ``pairs[index]``."""
    _check_beta(beta)
    margin = implicit_reward_margin(pairs[index], beta)
    return -beta * sigmoid(-margin) / len(pairs)
