"""Hypotheses, per-agent likelihood tables, signal sampling and KL constants.

All quantities are in nats.  Likelihood tables are stored as arrays of
shape ``(signals, hypotheses)`` so a column is the signal distribution
under one hypothesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

NORMALIZATION_TOL = 1e-12
MIN_LIKELIHOOD = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class HypothesisSet:
    labels: tuple[str, ...]
    true_index: int = 0

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ModelError("need at least two hypotheses")
        if len(set(self.labels)) != len(self.labels):
            raise ModelError("hypothesis labels must be distinct")
        if not 0 <= self.true_index < len(self.labels):
            raise ModelError(f"true hypothesis index {self.true_index} out of range")

    @property
    def m(self) -> int:
        return len(self.labels)

    def index(self, label: str | int) -> int:
        if isinstance(label, int):
            return label
        return self.labels.index(label)


class SignalModel:
    """Immutable collection of per-agent likelihood tables.

    Args:
        labels: hypothesis names, one per column.
        tables: one ``(|S_i|, m)`` array per agent; every column must sum
            to one and every entry must be at least ``MIN_LIKELIHOOD``.
    """

    def __init__(self, labels: Sequence[str], tables: Sequence[np.ndarray]):
        self.hypotheses = HypothesisSet(tuple(labels))
        arrays = []
        for i, table in enumerate(tables):
            arr = np.array(table, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != len(labels):
                raise ModelError(
                    f"agent {i + 1}: likelihoods must be signals x {len(labels)}, got {arr.shape}"
                )
            if arr.shape[0] < 1:
                raise ModelError(f"agent {i + 1}: empty signal space")
            if np.any(arr < MIN_LIKELIHOOD):
                raise ModelError(
                    f"agent {i + 1}: likelihood entry below {MIN_LIKELIHOOD} (full support required)"
                )
            err = np.abs(arr.sum(axis=0) - 1.0).max()
            if err > NORMALIZATION_TOL:
                raise ModelError(f"agent {i + 1}: columns do not sum to 1 (error {err:.3g})")
            arr.setflags(write=False)
            arrays.append(arr)
        if not arrays:
            raise ModelError("model has no agents")
        self.tables: tuple[np.ndarray, ...] = tuple(arrays)
        logs = []
        for arr in arrays:
            lg = np.log(arr)
            lg.setflags(write=False)
            logs.append(lg)
        self.log_tables: tuple[np.ndarray, ...] = tuple(logs)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.hypotheses.labels

    @property
    def m(self) -> int:
        return self.hypotheses.m

    @property
    def n(self) -> int:
        return len(self.tables)

    def signal_count(self, i: int) -> int:
        return self.tables[i].shape[0]

    def swapped(self, a: int, b: int) -> "SignalModel":
        """Copy of the model with hypothesis columns ``a`` and ``b`` exchanged."""
        perm = list(range(self.m))
        perm[a], perm[b] = perm[b], perm[a]
        return SignalModel(self.labels, [t[:, perm] for t in self.tables])

    @classmethod
    def from_dict(cls, data: dict) -> "SignalModel":
        labels = data["hypotheses"]
        tables = []
        for k, agent in enumerate(data["agents"]):
            rows = agent["likelihoods"]
            if "signals" in agent and int(agent["signals"]) != len(rows):
                raise ModelError(
                    f"agent {k + 1}: declares {agent['signals']} signals but has {len(rows)} rows"
                )
            tables.append(rows)
        return cls(labels, tables)

    def to_dict(self) -> dict:
        return {
            "hypotheses": list(self.labels),
            "agents": [
                {"signals": t.shape[0], "likelihoods": t.tolist()} for t in self.tables
            ],
        }


def load_model(path: str | Path) -> SignalModel:
    with open(path) as fh:
        return SignalModel.from_dict(json.load(fh))


def kl_divergence(model: SignalModel, i: int, theta1: int, theta2: int) -> float:
    p = model.tables[i][:, theta1]
    lp = model.log_tables[i]
    return float(np.sum(p * (lp[:, theta1] - lp[:, theta2])))


def expected_log_ratio(model: SignalModel, i: int, theta: int, theta_star: int) -> float:
    """``E[log l_i(w|theta)/l_i(w|theta_star)]`` with ``w ~ l_i(.|theta_star)``."""
    p = model.tables[i][:, theta_star]
    lp = model.log_tables[i]
    return float(np.sum(p * (lp[:, theta] - lp[:, theta_star])))


def sample_signal(model: SignalModel, i: int, theta_star: int, rng: np.random.Generator) -> int:
    cdf = np.cumsum(model.tables[i][:, theta_star])
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(cdf) - 1))


def sample_signals(
    model: SignalModel, i: int, theta_star: int, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Draw ``size`` i.i.d. signals; equal to ``size`` calls of :func:`sample_signal`."""
    cdf = np.cumsum(model.tables[i][:, theta_star])
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(idx, len(cdf) - 1)


def c0(model: SignalModel) -> float:
    """Largest absolute one-signal log-likelihood ratio over agents and pairs."""
    # the spread of a log-likelihood row bounds |log l(w|a) - log l(w|b)| for all a, b
    return max(float((lg.max(axis=1) - lg.min(axis=1)).max()) for lg in model.log_tables)


def c1(model: SignalModel, g, f: int, m: int) -> float:
    """Minimal detection capability over every reachable source component.

    Raises:
        AssumptionError: if some reduced graph lacks a unique source.
    """
    from .graph import min_source_kl

    return min_source_kl(g, f, m, model)


@dataclass(frozen=True)
class CumulativeLogLikelihood:
    """``values[theta] = sum_{r<=t} log l_i(s_r | theta)`` for one agent."""

    values: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, m: int) -> "CumulativeLogLikelihood":
        return cls(np.zeros(m), 0)

    def update(self, model: SignalModel, i: int, signal: int) -> "CumulativeLogLikelihood":
        return CumulativeLogLikelihood(self.values + model.log_tables[i][signal], self.t + 1)

    def log_ratio(self, theta1: int, theta2: int) -> float:
        return float(self.values[theta1] - self.values[theta2])


def cumulative_from_history(model: SignalModel, i: int, signals: Sequence[int]) -> np.ndarray:
    """Batch recomputation of the cumulative log-likelihood from a signal history."""
    out = np.zeros(model.m)
    for s in signals:
        out = out + model.log_tables[i][int(s)]
    return out
