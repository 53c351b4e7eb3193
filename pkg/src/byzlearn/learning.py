"""Per-agent learning rules on log-domain state.

Each step is a pure transition ``(old state, messages, signal) -> new state``.
Beliefs are kept as log-beliefs normalised by log-sum-exp; the pairwise rule
keeps an ``m x m`` table of log-likelihood-ratio statistics whose diagonal
is unused and held at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import DegenerateInputError, ReceivedMultiset, one_iter
from .signals import CumulativeLogLikelihood, SignalModel

RATIO_CLAMP = 1e8
DEFAULT_THRESHOLD = 10.0


class MissingNeighborError(ValueError):
    """A failure-free step was missing a neighbour's message."""


@dataclass(frozen=True)
class BeliefState:
    log_beliefs: np.ndarray
    t: int = 0

    @classmethod
    def uniform(cls, m: int) -> "BeliefState":
        return cls(np.full(m, -np.log(m)), 0)

    @property
    def beliefs(self) -> np.ndarray:
        return np.exp(self.log_beliefs)

    def log_ratio(self, theta1: int, theta2: int) -> float:
        return float(self.log_beliefs[theta1] - self.log_beliefs[theta2])


@dataclass(frozen=True)
class PairwiseRatios:
    table: np.ndarray
    t: int = 0
    clamped: bool = False

    @classmethod
    def zeros(cls, m: int) -> "PairwiseRatios":
        return cls(np.zeros((m, m)), 0)

    @property
    def m(self) -> int:
        return self.table.shape[0]


def _normalize(log_unnorm: np.ndarray) -> np.ndarray:
    return log_unnorm - np.logaddexp.reduce(log_unnorm)


def bfl_step(
    model: SignalModel,
    agent: int,
    belief: BeliefState,
    received: ReceivedMultiset,
    cumulative: CumulativeLogLikelihood,
    signal: int,
    f: int,
) -> tuple[BeliefState, CumulativeLogLikelihood]:
    """Byzantine-tolerant belief update.

    The received log-beliefs and the agent's own are combined by
    :func:`one_iter` in dimension ``m``; the result is added to the
    cumulative log-likelihood of all signals so far and renormalised.
    """
    eta = one_iter(belief.log_beliefs, received, f, model.m)
    return bfl_apply(model, agent, belief, eta, cumulative, signal)


def bfl_apply(
    model: SignalModel,
    agent: int,
    belief: BeliefState,
    eta: np.ndarray,
    cumulative: CumulativeLogLikelihood,
    signal: int,
) -> tuple[BeliefState, CumulativeLogLikelihood]:
    """Second half of :func:`bfl_step` given the One-Iter output ``eta``."""
    cum = cumulative.update(model, agent, signal)
    return BeliefState(_normalize(cum.values + eta), belief.t + 1), cum


def ff_bfl_step(
    model: SignalModel,
    agent: int,
    belief: BeliefState,
    received: ReceivedMultiset,
    cumulative: CumulativeLogLikelihood,
    signal: int,
) -> tuple[BeliefState, CumulativeLogLikelihood]:
    """Failure-free update: geometric mean over ``I_i + {i}`` with weight ``1/(|I_i|+1)``."""
    if received.defaults:
        raise MissingNeighborError(
            f"agent {agent + 1}: {received.defaults} neighbour(s) sent nothing in a failure-free run"
        )
    stacked = np.vstack([belief.log_beliefs] + [np.asarray(v, dtype=float) for v in received.values])
    cum = cumulative.update(model, agent, signal)
    mixed = stacked.sum(axis=0) / len(stacked)
    return BeliefState(_normalize(cum.values + mixed), belief.t + 1), cum


def pairwise_consensus(own: PairwiseRatios, received: ReceivedMultiset, f: int) -> np.ndarray:
    """Trimmed average for every ordered pair, before the likelihood term is added.

    Vectorised form of :func:`trimmed_scalar_round` applied entrywise; the
    sender-id tie-break there does not change which values survive.
    """
    k = len(received)
    if k < 2 * f + 1:
        raise DegenerateInputError(f"trimming needs at least {2 * f + 1} received values, got {k}")
    stacked = np.sort(np.array([np.asarray(v, dtype=float) for v in received.values]), axis=0)
    kept = stacked[f:k - f]
    out = (kept.sum(axis=0) + own.table) / (len(kept) + 1)
    np.fill_diagonal(out, 0.0)
    return out


def pairwise_step(
    model: SignalModel,
    agent: int,
    ratios: PairwiseRatios,
    received: ReceivedMultiset,
    cumulative: CumulativeLogLikelihood,
    signal: int,
    f: int,
) -> tuple[PairwiseRatios, CumulativeLogLikelihood]:
    """Pairwise learning update; received tables are never assumed antisymmetric."""
    cum = cumulative.update(model, agent, signal)
    mixed = pairwise_consensus(ratios, received, f)
    llr = cum.values[:, None] - cum.values[None, :]
    table = mixed + llr
    np.fill_diagonal(table, 0.0)
    clamped = bool(np.any(np.abs(table) > RATIO_CLAMP))
    if clamped:
        table = np.clip(table, -RATIO_CLAMP, RATIO_CLAMP)
    return PairwiseRatios(table, ratios.t + 1, clamped), cum


def pairwise_decide(ratios: PairwiseRatios | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> int | None:
    """Return the hypothesis that beats every other by ``threshold``, or ``None``."""
    table = ratios.table if isinstance(ratios, PairwiseRatios) else np.asarray(ratios)
    m = table.shape[0]
    winners = [
        a for a in range(m)
        if all(table[a, b] >= threshold for b in range(m) if b != a)
    ]
    return winners[0] if len(winners) == 1 else None


def belief_decide(belief: BeliefState | np.ndarray, level: float = 0.99) -> int | None:
    """Hypothesis holding at least ``level`` of the belief mass, or ``None``."""
    lb = belief.log_beliefs if isinstance(belief, BeliefState) else np.asarray(belief)
    best = int(np.argmax(lb))
    return best if lb[best] >= np.log(level) else None
