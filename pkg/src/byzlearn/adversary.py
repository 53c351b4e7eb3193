"""Full-knowledge Byzantine strategies.

A strategy turns a read-only :class:`SystemView` of the start of a round
into one message per outgoing edge of a faulty agent.  Messages carry the
same payload shape as honest traffic for the running rule: a log-belief
vector for BFL, an ``m x m`` ratio table for pairwise learning, a 0-d array
for scalar consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .graph import Digraph
from .signals import SignalModel

KINDS = ("silent", "fixed", "random", "extreme", "split_brain", "mimic_flipped")

_PARAMS = {
    "silent": set(),
    "fixed": {"value"},
    "random": {"scale"},
    "extreme": {"factor", "target"},
    "split_brain": {"factor"},
    "mimic_flipped": {"target"},
}

PURPOSE_ADVERSARY = 1


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adversary strategy {self.kind!r}; expected one of {KINDS}")
        extra = set(self.params) - _PARAMS[self.kind]
        if extra:
            raise ValueError(f"strategy {self.kind!r} does not take parameters {sorted(extra)}")
        for key in ("value", "scale", "factor"):
            if key in self.params and not np.isfinite(float(self.params[key])):
                raise ValueError(f"strategy parameter {key} must be finite")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @classmethod
    def from_dict(cls, data: dict) -> "StrategySpec":
        return cls(data["kind"], data.get("params", {}))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    def target(self, m: int, theta_star: int) -> int:
        t = self.params.get("target")
        if t is None:
            return next(k for k in range(m) if k != theta_star)
        return int(t)


@dataclass(frozen=True)
class SystemView:
    """Start-of-round snapshot handed to the adversary.

    ``states`` maps each honest agent to the quantity it transmits this
    round; ``shadow`` holds the private state of ``mimic_flipped`` agents.
    Arrays are read-only.
    """

    round: int
    graph: Digraph
    rule: str
    model: SignalModel
    theta_star: int
    seed: int
    states: Mapping[int, np.ndarray]
    cumulative: Mapping[int, np.ndarray]
    signal_history: np.ndarray
    shadow: Mapping[int, np.ndarray] = field(default_factory=dict)

    @property
    def honest(self) -> tuple[int, ...]:
        return tuple(sorted(self.states))

    def honest_range(self) -> tuple[np.ndarray, np.ndarray]:
        stacked = np.stack([self.states[i] for i in self.honest])
        return stacked.min(axis=0), stacked.max(axis=0)

    def rng(self, agent: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, agent, self.round, PURPOSE_ADVERSARY])


def _span(lo: np.ndarray, hi: np.ndarray) -> float:
    return max(float(np.max(hi - lo)), 1.0)


def _extreme_payload(spec: StrategySpec, view: SystemView) -> np.ndarray:
    lo, hi = view.honest_range()
    factor = float(spec.params.get("factor", 10.0))
    push = factor * _span(lo, hi)
    if lo.ndim == 0:
        return np.asarray(hi + push)
    m = view.model.m
    target = spec.target(m, view.theta_star)
    if lo.ndim == 1:
        out = lo - push
        out[target] = hi[target] + push
        return out
    # ratio table: target beats everything, everything beats the true state
    out = (lo + hi) / 2
    out[target, :] = hi[target, :] + push
    out[:, target] = lo[:, target] - push
    np.fill_diagonal(out, 0.0)
    return out


def craft_messages(spec: StrategySpec, j: int, view: SystemView) -> dict[int, np.ndarray]:
    """Messages from faulty agent ``j`` keyed by receiver; absent keys mean silence."""
    receivers = view.graph.outgoing(j)
    kind = spec.kind
    if kind == "silent" or not receivers:
        return {}
    lo, hi = view.honest_range()
    if kind == "fixed":
        payload = np.full(lo.shape, float(spec.params.get("value", 0.0)))
        return {r: payload.copy() for r in receivers}
    if kind == "random":
        rng = view.rng(j)
        s = float(spec.params.get("scale", 1.0)) * _span(lo, hi)
        return {r: rng.uniform(lo - s, hi + s) for r in receivers}
    if kind == "extreme":
        payload = _extreme_payload(spec, view)
        return {r: payload.copy() for r in receivers}
    if kind == "split_brain":
        # alternate -K / +K by receiver id, K = factor x honest range
        k = float(spec.params.get("factor", 10.0)) * _span(lo, hi)
        low, high = np.full(lo.shape, -k), np.full(lo.shape, k)
        return {r: (low if idx % 2 == 0 else high).copy() for idx, r in enumerate(receivers)}
    if kind == "mimic_flipped":
        state = view.shadow[j]
        return {r: np.array(state, copy=True) for r in receivers}
    raise AssertionError(kind)


def flipped_model(model: SignalModel, theta_star: int, target: int) -> SignalModel:
    """Model a ``mimic_flipped`` agent believes: columns of the true and target states swapped."""
    return model.swapped(theta_star, target)
