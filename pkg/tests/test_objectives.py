from __future__ import annotations

import math
import random

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decomprag.objectives import (
    ObjectiveError,
    PairLogProbs,
    TokenLogProbTrace,
    dpo_grad_wrt_chosen_token,
    dpo_loss,
    implicit_reward_margin,
    log_sigmoid,
    sft_loss,
)
from oracles import oracle_neg_log_sigmoid, oracle_sum

# frozen from the 60-digit oracle
NEG_LOG_SIGMOID_2 = mpmath.mpf("0.126928011042972496443726806358")


def T(*lps, tokens=None):
    return TokenLogProbTrace(tuple(lps), tokens)


def pair_with_deltas(d_plus: float, d_minus: float) -> PairLogProbs:
    # reference sequences score -40; the policy is shifted by the delta
    return PairLogProbs(T(-40.0 + d_plus), T(-40.0), T(-40.0 + d_minus), T(-40.0))


# --- traces ------------------------------------------------------------------


def test_trace_validation():
    with pytest.raises(ObjectiveError):
        T(0.1)
    with pytest.raises(ObjectiveError):
        T(-1.0, tokens=("a", "b"))
    with pytest.raises(ObjectiveError):
        T(float("nan"))
    assert T(-0.5, -1.0).total == -1.5


def test_pair_validation():
    with pytest.raises(ObjectiveError):
        PairLogProbs(T(-1.0), T(-1.0, -1.0), T(-1.0), T(-1.0))
    with pytest.raises(ObjectiveError):
        PairLogProbs(T(-1.0, tokens=("a",)), T(-1.0, tokens=("b",)), T(-1.0), T(-1.0))


# --- SFT ---------------------------------------------------------------------


def test_sft_examples():
    assert sft_loss([T(-0.5, -1.0)]) == 1.5
    assert sft_loss([T(-0.5, -1.0), T(-2.5)]) == 2.0
    with pytest.raises(ObjectiveError):
        sft_loss([])


def test_sft_matches_high_precision_sum():
    rng = random.Random(3)
    lps = [-rng.expovariate(0.3) for _ in range(64)]
    expected = -oracle_sum(lps)
    assert abs(sft_loss([T(*lps)]) - float(expected)) < 1e-12


def test_sft_strictly_decreasing_in_each_logprob():
    base = [-1.0, -2.0, -0.5]
    for i in range(3):
        bumped = list(base)
        bumped[i] += 0.25
        assert sft_loss([T(*bumped)]) < sft_loss([T(*base)])


# --- DPO ---------------------------------------------------------------------


def test_zero_margin_is_ln2():
    pair = PairLogProbs(T(-1.0, -2.0), T(-1.0, -2.0), T(-0.7), T(-0.7))
    assert abs(dpo_loss([pair]) - math.log(2)) < 1e-9
    assert implicit_reward_margin(pair, 0.5) == 0.0


def test_margin_two_against_oracle():
    pair = pair_with_deltas(2.0, -2.0)
    assert implicit_reward_margin(pair, 0.5) == 2.0
    oracle = oracle_neg_log_sigmoid(2)
    assert abs(oracle - NEG_LOG_SIGMOID_2) < mpmath.mpf("1e-29")
    assert abs(dpo_loss([pair], beta=0.5) - float(oracle)) < 1e-9


def test_default_beta_is_half():
    pair = pair_with_deltas(2.0, -2.0)
    assert dpo_loss([pair]) == dpo_loss([pair], beta=0.5)


def test_beta_must_be_positive():
    with pytest.raises(ObjectiveError):
        dpo_loss([pair_with_deltas(0, 0)], beta=0)
    with pytest.raises(ObjectiveError):
        dpo_loss([], beta=0.5)


def test_monotone_decrease_towards_zero():
    losses = [dpo_loss([pair_with_deltas(m, 0.0)], beta=1.0) for m in range(21)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-8


def test_positive_margin_iff_loss_below_ln2():
    for m in (-1.0, -0.01, 0.01, 1.0):
        pair = pair_with_deltas(m, 0.0)
        assert (implicit_reward_margin(pair, 0.5) > 0) == (dpo_loss([pair]) < math.log(2))


@pytest.mark.parametrize("x", [-1e4, -800.0, -40.0, 0.0, 40.0, 800.0, 1e4])
def test_log_sigmoid_is_stable(x):
    value = log_sigmoid(x)
    assert math.isfinite(value)
    assert value == pytest.approx(-float(oracle_neg_log_sigmoid(x)), rel=1e-12, abs=1e-300)


def test_batch_mean():
    pairs = [pair_with_deltas(2.0, -2.0), pair_with_deltas(0.0, 0.0)]
    expected = (float(oracle_neg_log_sigmoid(2)) + math.log(2)) / 2
    assert abs(dpo_loss(pairs) - expected) < 1e-12


@settings(max_examples=200)
@given(
    st.floats(-50, 0), st.floats(-50, 0), st.floats(-50, 0), st.floats(-50, 0),
    st.floats(-20, 0), st.floats(0.05, 5),
)
def test_shift_invariance(cp, cr, rp, rr, shift, beta):
    pair = PairLogProbs(T(cp), T(cr), T(rp), T(rr))
    shifted = PairLogProbs(T(cp + shift), T(cr + shift), T(rp), T(rr))
    assert abs(dpo_loss([pair], beta) - dpo_loss([shifted], beta)) < 1e-9


@settings(max_examples=200)
@given(st.floats(-30, 30))
def test_swap_symmetry(margin):
    pair = pair_with_deltas(margin, 0.0)
    swapped = PairLogProbs(pair.rejected_policy, pair.rejected_reference, pair.chosen_policy, pair.chosen_reference)
    total = dpo_loss([pair], 1.0) + dpo_loss([swapped], 1.0)
    assert total >= 2 * math.log(2) - 1e-12
    if margin == 0:
        assert abs(total - 2 * math.log(2)) < 1e-12


def _central_difference(pairs, index, token, beta, h=1e-5):
    def loss_with(delta):
        p = pairs[index]
        lps = list(p.chosen_policy.logprobs)
        lps[token] += delta
        moved = PairLogProbs(T(*lps), p.chosen_reference, p.rejected_policy, p.rejected_reference)
        return dpo_loss(pairs[:index] + [moved] + pairs[index + 1 :], beta)

    return (loss_with(h) - loss_with(-h)) / (2 * h)


def test_gradient_matches_finite_differences():
    rng = random.Random(11)
    pairs = []
    for _ in range(4):
        n, m = rng.randint(2, 6), rng.randint(2, 6)
        pairs.append(
            PairLogProbs(
                T(*[-rng.uniform(0.1, 3) for _ in range(n)]),
                T(*[-rng.uniform(0.1, 3) for _ in range(n)]),
                T(*[-rng.uniform(0.1, 3) for _ in range(m)]),
                T(*[-rng.uniform(0.1, 3) for _ in range(m)]),
            )
        )
    for beta in (0.1, 0.5, 2.0):
        for i in range(len(pairs)):
            analytic = dpo_grad_wrt_chosen_token(pairs, i, beta)
            numeric = _central_difference(pairs, i, 1, beta)
            assert abs(numeric - analytic) / abs(analytic) < 1e-6


def test_gradient_against_high_precision_derivative():
    pair = pair_with_deltas(1.3, -0.4)
    beta = 0.5
    margin = mpmath.mpf(beta) * (mpmath.mpf(1.3) - mpmath.mpf(-0.4))
    exact = mpmath.diff(lambda x: -mpmath.log(1 / (1 + mpmath.exp(-(margin + beta * x)))), 0)
    assert abs(dpo_grad_wrt_chosen_token([pair], 0, beta) - float(exact)) < 1e-12
