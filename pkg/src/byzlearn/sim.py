"""Synchronous round engine, traces and diagnostics.

Round ``t`` runs in three phases: every agent transmits its state from
round ``t - 1`` (faulty agents via their strategy), every agent observes a
fresh signal, and honest agents apply their rule.  Randomness is split into
substreams keyed by ``(seed, agent, purpose)``, so an agent's signal
sequence does not depend on which other agents exist.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Sequence

import numpy as np

from .adversary import StrategySpec, SystemView, craft_messages, flipped_model
from .consensus import DegenerateInputError, ReceivedMultiset, one_iter, one_iter_many, trimmed_scalar_round
from .graph import AssumptionError, Digraph, check_identifiability, check_topology
from .learning import (
    DEFAULT_THRESHOLD,
    BeliefState,
    PairwiseRatios,
    belief_decide,
    bfl_apply,
    bfl_step,
    ff_bfl_step,
    pairwise_consensus,
    pairwise_decide,
    pairwise_step,
)
from .signals import CumulativeLogLikelihood, SignalModel, c0, sample_signals

log = logging.getLogger(__name__)

RULES = ("bfl", "ff_bfl", "pairwise", "consensus")
PURPOSE_SIGNAL = 0
PURPOSE_FAULTY = 2
PURPOSE_INIT = 3
MIN_FIT_ROUNDS = 20


class ScenarioError(ValueError):
    """Invalid scenario description."""


class AssumptionCheckFailed(RuntimeError):
    """A scenario failed its topology or identifiability gate."""

    def __init__(self, message: str, checks: dict):
        super().__init__(message)
        self.checks = checks


@dataclass
class ScenarioConfig:
    graph: Digraph
    rule: str
    model: SignalModel | None = None
    f: int = 0
    theta_star: int = 0
    faulty: tuple[int, ...] | str = ()
    strategy: StrategySpec | None = None
    rounds: int = 100
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    belief_level: float = 0.99
    initial: tuple[float, ...] | str | None = None
    force: bool = False
    name: str = "scenario"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ScenarioError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if self.rule != "consensus" and self.model is None:
            raise ScenarioError(f"rule {self.rule} needs a signal model")
        if self.model is not None and self.model.n != self.graph.n:
            raise ScenarioError(f"model has {self.model.n} agents, graph has {self.graph.n}")
        if self.model is not None and not 0 <= self.theta_star < self.model.m:
            raise ScenarioError("theta_star out of range")
        if self.f < 0 or self.rounds < 0:
            raise ScenarioError("f and rounds must be nonnegative")
        if self.rule == "ff_bfl" and (self.f != 0 or self.faulty not in ((), "random:0")):
            raise ScenarioError("ff_bfl runs are failure-free: f must be 0 and no agent faulty")
        if isinstance(self.faulty, str):
            if not self.faulty.startswith("random:"):
                raise ScenarioError(f"faulty must be a list of ids or 'random:k', got {self.faulty!r}")
            k = int(self.faulty.split(":", 1)[1])
            if k > self.f:
                raise ScenarioError(f"{k} faulty agents exceed the budget f={self.f}")
        else:
            if len(set(self.faulty)) > self.f:
                raise ScenarioError(f"{len(set(self.faulty))} faulty agents exceed the budget f={self.f}")
            if any(not 0 <= j < self.graph.n for j in self.faulty):
                raise ScenarioError("faulty agent id out of range")
        if self.strategy is None and self.faulty not in ((), "random:0"):
            self.strategy = StrategySpec("silent")

    @property
    def dimension(self) -> int:
        """Dimension of the consensus-carried vector used by the topology gate."""
        return self.model.m if self.rule == "bfl" else 1

    def faulty_set(self) -> tuple[int, ...]:
        if isinstance(self.faulty, str):
            k = int(self.faulty.split(":", 1)[1])
            rng = np.random.default_rng([self.seed, 0, 0, PURPOSE_FAULTY])
            return tuple(sorted(int(x) for x in rng.choice(self.graph.n, size=k, replace=False)))
        return tuple(sorted(set(self.faulty)))

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ScenarioConfig":
        base = Path(base_dir)
        graph_spec = data["graph"]
        if isinstance(graph_spec, str):
            graph_spec = json.loads((base / graph_spec).read_text())
        graph = Digraph.from_dict(graph_spec)
        model = None
        model_spec = data.get("model")
        if isinstance(model_spec, str):
            model_spec = json.loads((base / model_spec).read_text())
        if model_spec is not None:
            model = SignalModel.from_dict(model_spec)
        theta = data.get("theta_star", 0)
        if model is not None and isinstance(theta, str):
            theta = model.labels.index(theta)
        adv = data.get("adversary") or {}
        faulty = adv.get("faulty", [])
        if not isinstance(faulty, str):
            faulty = tuple(int(j) - 1 for j in faulty)
        strategy = StrategySpec.from_dict(adv["strategy"]) if "strategy" in adv else None
        initial = data.get("initial")
        if isinstance(initial, list):
            initial = tuple(float(v) for v in initial)
        known = {"graph", "model", "rule", "f", "theta_star", "adversary", "rounds", "seed",
                 "threshold", "belief_level", "initial", "force", "name", "output"}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(
            graph=graph,
            rule=data["rule"],
            model=model,
            f=int(data.get("f", 0)),
            theta_star=int(theta),
            faulty=faulty,
            strategy=strategy,
            rounds=int(data.get("rounds", 100)),
            seed=int(data.get("seed", 0)),
            threshold=float(data.get("threshold", DEFAULT_THRESHOLD)),
            belief_level=float(data.get("belief_level", 0.99)),
            initial=initial,
            force=bool(data.get("force", False)),
            name=str(data.get("name", "scenario")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rule": self.rule,
            "graph": self.graph.to_dict(),
            "model": None if self.model is None else self.model.to_dict(),
            "f": self.f,
            "theta_star": None if self.model is None else self.model.labels[self.theta_star],
            "adversary": {
                "faulty": self.faulty if isinstance(self.faulty, str) else [j + 1 for j in self.faulty],
                "strategy": None if self.strategy is None else self.strategy.to_dict(),
            },
            "rounds": self.rounds,
            "seed": self.seed,
            "threshold": self.threshold,
            "belief_level": self.belief_level,
            "initial": list(self.initial) if isinstance(self.initial, tuple) else self.initial,
        }


def load_scenario(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return ScenarioConfig.from_dict(data, p.parent)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"{p}: missing or malformed field {exc}") from exc


def check_assumptions(config: ScenarioConfig) -> dict:
    """Topology and identifiability gate for a scenario.

    Returns a dict with ``passed`` plus the individual reports.
    """
    g = config.graph
    dim = config.dimension
    out: dict = {"dimension": dim}
    topo = check_topology(g, config.f, dim)
    out["topology"] = topo.to_dict()
    passed = topo.assumption_holds
    if config.model is not None and topo.assumption_holds:
        ident = check_identifiability(g, config.f, dim, config.model, config.theta_star)
        worst = min(ident.entries, key=lambda e: e["kl_sum"]) if ident.entries else None
        out["identifiability"] = {"holds": ident.holds, "min_kl_sum": ident.min_kl_sum, "worst": worst}
        passed = passed and ident.holds
    out["passed"] = passed
    return out


@dataclass
class RoundTrace:
    """Per-round honest state.

    ``states[t, k]`` is honest agent ``honest[k]``'s state after round
    ``t`` (row 0 is the initial state).  ``consensus`` holds the quantity
    the consensus step acts on when it differs from ``states`` (the
    pre-innovation ratio table for pairwise learning).
    """

    rule: str
    labels: tuple[str, ...]
    n: int
    honest: tuple[int, ...]
    faulty: tuple[int, ...]
    theta_star: int
    states: np.ndarray
    diameters: np.ndarray
    signals: np.ndarray
    consensus: np.ndarray | None = None
    flags: list[tuple[int, int, str, float]] = field(default_factory=list)
    events: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return self.states.shape[0] - 1

    def carried(self) -> np.ndarray:
        return self.states if self.consensus is None else self.consensus

    def index(self, agent: int) -> int:
        return self.honest.index(agent)

    def series(self, agent: int, theta: int) -> np.ndarray:
        """Decay series for ``(agent, theta)``: log-belief, or ``-r(theta*, theta)``."""
        k = self.index(agent)
        if self.rule == "pairwise":
            return -self.states[:, k, self.theta_star, theta]
        return self.states[:, k, theta]


@dataclass(frozen=True)
class DecayFit:
    a: float
    b: float
    c: float
    r2: float
    partial_r2: float

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "r2": self.r2, "partial_r2": self.partial_r2}


class InsufficientDataError(ValueError):
    pass


def fit_quadratic(rounds: Sequence[float], values: Sequence[float]) -> DecayFit:
    """Least-squares ``a t^2 + b t + c`` with R^2 and the quadratic term's partial R^2.

    ``partial_r2`` is the share of the linear fit's residual the ``t^2``
    term removes; it is near 0 for linear data and 1 for exact parabolas.
    """
    t = np.asarray(rounds, dtype=float)
    y = np.asarray(values, dtype=float)
    full = np.vstack([t * t, t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(full, y, rcond=None)
    sse = float(np.sum((full @ coef - y) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - sse / sst
    lin = full[:, 1:]
    lcoef, *_ = np.linalg.lstsq(lin, y, rcond=None)
    sse_lin = float(np.sum((lin @ lcoef - y) ** 2))
    scale = max(sst, float(np.sum(y * y)), 1e-300)
    partial = 0.0 if sse_lin <= 1e-24 * scale else max(0.0, (sse_lin - sse) / sse_lin)
    return DecayFit(float(coef[0]), float(coef[1]), float(coef[2]), r2, partial)


def fit_quadratic_decay(trace: RoundTrace, agent: int, theta: int) -> DecayFit:
    """Quadratic fit of ``log mu_t(theta)`` over the trailing half of the run."""
    if theta == trace.theta_star:
        raise ValueError("decay fits are for wrong hypotheses only")
    if trace.rounds < MIN_FIT_ROUNDS:
        raise InsufficientDataError(
            f"trace has {trace.rounds} rounds; decay fits need at least {MIN_FIT_ROUNDS}"
        )
    y = trace.series(agent, theta)
    start = trace.rounds // 2
    t = np.arange(start, trace.rounds + 1)
    return fit_quadratic(t, y[start:])


def consensus_diameter(trace: RoundTrace, t: int) -> float:
    """Largest L-infinity distance between two honest agents' carried state at round ``t``."""
    x = trace.carried()[t]
    if x.shape[0] < 2:
        return 0.0
    return float(np.max(x.max(axis=0) - x.min(axis=0)))


def _diameter(stacked: np.ndarray) -> float:
    if stacked.shape[0] < 2:
        return 0.0
    return float(np.max(stacked.max(axis=0) - stacked.min(axis=0)))


@dataclass
class SimulationResult:
    trace: RoundTrace
    summary: dict


def _signal_streams(config: ScenarioConfig) -> np.ndarray:
    n, T = config.graph.n, config.rounds
    out = np.zeros((T, n), dtype=np.int64)
    if config.model is None:
        return out
    for i in range(n):
        rng = np.random.default_rng([config.seed, i, 0, PURPOSE_SIGNAL])
        out[:, i] = sample_signals(config.model, i, config.theta_star, rng, T)
    return out


def _initial_values(config: ScenarioConfig) -> np.ndarray:
    n = config.graph.n
    init = config.initial
    if isinstance(init, tuple):
        if len(init) != n:
            raise ScenarioError(f"initial has {len(init)} values for {n} agents")
        return np.array(init, dtype=float)
    lo, hi = -100.0, 100.0
    if isinstance(init, str) and init.startswith("random:"):
        lo, hi = (float(v) for v in init.split(":", 1)[1].split(","))
    out = np.empty(n)
    for i in range(n):
        out[i] = np.random.default_rng([config.seed, i, 0, PURPOSE_INIT]).uniform(lo, hi)
    return out


class _Agent:
    """Mutable per-agent bookkeeping used only inside :func:`run_scenario`."""

    __slots__ = ("state", "cum", "consensus")

    def __init__(self, state, cum, consensus=None):
        self.state = state
        self.cum = cum
        self.consensus = consensus


def _payload(rule: str, state) -> np.ndarray:
    if rule in ("bfl", "ff_bfl"):
        return state.log_beliefs
    if rule == "pairwise":
        return state.table
    return np.asarray(state)


def _step(rule, model, i, agent: _Agent, received: ReceivedMultiset, signal, f):
    if rule == "bfl":
        agent.state, agent.cum = bfl_step(model, i, agent.state, received, agent.cum, signal, f)
    elif rule == "ff_bfl":
        agent.state, agent.cum = ff_bfl_step(model, i, agent.state, received, agent.cum, signal)
    elif rule == "pairwise":
        agent.consensus = pairwise_consensus(agent.state, received, f)
        agent.state, agent.cum = pairwise_step(model, i, agent.state, received, agent.cum, signal, f)
    else:
        agent.state = trimmed_scalar_round(float(agent.state), received, f)


def _batched_etas(model, agents, collected: dict, f: int, t: int) -> dict:
    """One-Iter outputs for every honest agent, solved as a single batch."""
    order = list(collected)
    try:
        out = one_iter_many([agents[i].state.log_beliefs for i in order],
                            [collected[i] for i in order], f, model.m)
    except DegenerateInputError:
        # redo one at a time so the error names the offending agent
        for i in order:
            try:
                one_iter(agents[i].state.log_beliefs, collected[i], f, model.m)
            except DegenerateInputError as exc:
                raise DegenerateInputError(f"round {t}, agent {i + 1}: {exc}") from exc
        raise
    return dict(zip(order, out))


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def run_scenario(config: ScenarioConfig, check: bool = True) -> SimulationResult:
    """Run ``config.rounds`` synchronous rounds.

    Raises:
        AssumptionCheckFailed: when the topology/identifiability gate fails
            and ``config.force`` is not set.
    """
    checks = check_assumptions(config) if check else {"passed": None}
    if check and not checks["passed"]:
        msg = f"scenario {config.name!r} fails its assumption checks: {json.dumps(checks)}"
        if not config.force:
            raise AssumptionCheckFailed(msg, checks)
        log.warning("%s (continuing because of force)", msg)

    g, model, rule, f = config.graph, config.model, config.rule, config.f
    faulty = config.faulty_set()
    honest = tuple(i for i in range(g.n) if i not in faulty)
    T = config.rounds
    signals = _signal_streams(config)
    m = model.m if model is not None else 1

    def fresh(i):
        if rule in ("bfl", "ff_bfl"):
            return _Agent(BeliefState.uniform(m), CumulativeLogLikelihood.zeros(m))
        if rule == "pairwise":
            return _Agent(PairwiseRatios.zeros(m), CumulativeLogLikelihood.zeros(m), np.zeros((m, m)))
        return _Agent(float(init_values[i]), None)

    init_values = _initial_values(config) if rule == "consensus" else None
    agents = {i: fresh(i) for i in honest}
    mimic = config.strategy is not None and config.strategy.kind == "mimic_flipped"
    shadows = {j: fresh(j) for j in faulty} if mimic else {}
    shadow_model = None
    if mimic and model is not None:
        shadow_model = flipped_model(model, config.theta_star, config.strategy.target(m, config.theta_star))

    def snapshot():
        return np.stack([_payload(rule, agents[i].state) for i in honest])

    def carried():
        if rule == "pairwise":
            return np.stack([agents[i].consensus for i in honest])
        return snapshot()

    first = snapshot()
    states = np.empty((T + 1,) + first.shape)
    states[0] = first
    cons = np.empty_like(states) if rule == "pairwise" else None
    if cons is not None:
        cons[0] = carried()
    diameters = np.empty(T + 1)
    diameters[0] = _diameter(carried())
    flags: list[tuple[int, int, str, float]] = []
    events: list[tuple[str, int, int]] = []
    outgoing = {j: g.outgoing(j) for j in range(g.n)}

    for t in range(1, T + 1):
        inbox: dict[int, dict[int, np.ndarray]] = {i: {} for i in range(g.n)}
        for i in honest:
            payload = _payload(rule, agents[i].state)
            for r in outgoing[i]:
                inbox[r][i] = payload
            events.append(("send", t, i))
        if faulty:
            view = SystemView(
                round=t,
                graph=g,
                rule=rule,
                model=model,
                theta_star=config.theta_star,
                seed=config.seed,
                states=MappingProxyType({i: _readonly(_payload(rule, agents[i].state)) for i in honest}),
                cumulative=MappingProxyType({
                    i: _readonly(agents[i].cum.values) for i in honest if agents[i].cum is not None
                }),
                signal_history=_readonly(signals[: t - 1][:, list(honest)]),
                shadow=MappingProxyType({j: _readonly(_payload(rule, s.state)) for j, s in shadows.items()}),
            )
            for j in faulty:
                for r, msg in craft_messages(config.strategy, j, view).items():
                    inbox[r][j] = msg
                events.append(("send", t, j))
        sig = signals[t - 1]
        collected = {
            i: ReceivedMultiset.collect(g.incoming[i], inbox[i], _payload(rule, agents[i].state))
            for i in honest
        }
        etas = _batched_etas(model, agents, collected, f, t) if rule == "bfl" else None
        for i in honest:
            a = agents[i]
            received = collected[i]
            if received.defaults:
                flags.append((t, i, "default", float(received.defaults)))
            try:
                if etas is not None:
                    a.state, a.cum = bfl_apply(model, i, a.state, etas[i], a.cum, int(sig[i]))
                else:
                    _step(rule, model, i, a, received, int(sig[i]), f)
            except (DegenerateInputError, ValueError) as exc:
                raise type(exc)(f"round {t}, agent {i + 1}: {exc}") from exc
            if rule == "pairwise" and a.state.clamped:
                flags.append((t, i, "clamp", 1.0))
            events.append(("update", t, i))
        for j, s in shadows.items():
            received = ReceivedMultiset.collect(g.incoming[j], inbox[j], _payload(rule, s.state))
            try:
                _step(rule, shadow_model, j, s, received, int(sig[j]), f)
            except DegenerateInputError:
                pass
        states[t] = snapshot()
        if cons is not None:
            cons[t] = carried()
        diameters[t] = _diameter(carried())

    trace = RoundTrace(
        rule=rule,
        labels=model.labels if model is not None else ("x",),
        n=g.n,
        honest=honest,
        faulty=faulty,
        theta_star=config.theta_star,
        states=states,
        diameters=diameters,
        signals=signals,
        consensus=cons,
        flags=flags,
        events=events,
    )
    return SimulationResult(trace, summarize(trace, config, checks))


def decisions(trace: RoundTrace, threshold: float = DEFAULT_THRESHOLD, level: float = 0.99) -> np.ndarray:
    """``out[t, k]``: hypothesis agent ``honest[k]`` settles on at round ``t`` (-1 if none)."""
    out = np.full(trace.states.shape[:2], -1, dtype=np.int64)
    if trace.rule == "consensus":
        return out
    for t in range(trace.states.shape[0]):
        for k in range(len(trace.honest)):
            s = trace.states[t, k]
            d = pairwise_decide(s, threshold) if trace.rule == "pairwise" else belief_decide(s, level)
            out[t, k] = -1 if d is None else d
    return out


def _settle_round(column: np.ndarray, target: int) -> int | None:
    bad = np.flatnonzero(column != target)
    if len(bad) == 0:
        return 0
    last = int(bad[-1])
    return None if last == len(column) - 1 else last + 1


def summarize(trace: RoundTrace, config: ScenarioConfig, checks: dict) -> dict:
    labels = trace.labels
    T = trace.rounds
    summary: dict = {
        "name": config.name,
        "rule": trace.rule,
        "seed": config.seed,
        "rounds": T,
        "n": trace.n,
        "f": config.f,
        "honest": [i + 1 for i in trace.honest],
        "faulty": [j + 1 for j in trace.faulty],
        "strategy": None if config.strategy is None else config.strategy.to_dict(),
        "assumptions": checks,
        "diameter": {
            "initial": float(trace.diameters[0]),
            "final": float(trace.diameters[-1]),
            "max": float(trace.diameters.max()),
        },
        "flags": {
            name: int(sum(1 for fl in trace.flags if fl[2] == name)) for name in ("default", "clamp")
        },
    }
    agents: dict = {}
    if trace.rule == "consensus":
        for k, i in enumerate(trace.honest):
            agents[str(i + 1)] = {"final_value": float(trace.states[-1, k])}
        summary["agents"] = agents
        summary["success"] = None
        summary["decision_round"] = None
        summary["fits"] = []
        return summary
    summary["theta_star"] = labels[trace.theta_star]
    summary["c0"] = c0(config.model)
    dec = decisions(trace, config.threshold, config.belief_level)
    settle = []
    for k, i in enumerate(trace.honest):
        final = trace.states[-1, k]
        d = int(dec[-1, k])
        rnd = _settle_round(dec[:, k], trace.theta_star)
        settle.append(rnd)
        entry: dict = {
            "decision": None if d < 0 else labels[d],
            "decision_round": rnd,
        }
        if trace.rule == "pairwise":
            entry["final_ratios"] = {
                f"{labels[a]}|{labels[b]}": float(final[a, b])
                for a in range(len(labels)) for b in range(len(labels)) if a != b
            }
        else:
            entry["final_log_beliefs"] = {labels[a]: float(final[a]) for a in range(len(labels))}
            entry["final_beliefs"] = {labels[a]: float(math.exp(final[a])) for a in range(len(labels))}
        agents[str(i + 1)] = entry
    summary["agents"] = agents
    summary["success"] = bool(all(int(dec[-1, k]) == trace.theta_star for k in range(len(trace.honest))))
    summary["decision_round"] = None if any(s is None for s in settle) else max(settle)
    fits = []
    if T >= MIN_FIT_ROUNDS:
        for i in trace.honest:
            for th in range(len(labels)):
                if th == trace.theta_star:
                    continue
                fit = fit_quadratic_decay(trace, i, th)
                fits.append({"agent": i + 1, "theta": labels[th], **fit.to_dict()})
    summary["fits"] = fits
    return summary


class MatrixReplay:
    """Closed-form replay of a failure-free run through the fixed weight matrix.

    ``A[i, j] = 1/(|I_i| + 1)`` for ``j`` in ``I_i + {i}``.
    """

    def __init__(self, g: Digraph, tol: float = 1e-9):
        n = g.n
        a = np.zeros((n, n))
        for i in range(n):
            members = [i, *sorted(g.incoming[i])]
            a[i, members] = 1.0 / len(members)
        self.A = a
        self.n = n
        self.lam = (1.0 - float(n) ** (-n)) ** (1.0 / n)
        power = np.eye(n)
        self.converged_at = None
        for k in range(1, 10 * n * n + 1):
            nxt = power @ a
            if np.max(np.abs(nxt - power)) <= tol:
                self.converged_at = k
                power = nxt
                break
            power = nxt
        self.limit = power
        self.pi = power.mean(axis=0)

    def increments(self, model: SignalModel, signals: np.ndarray, theta: int, theta_star: int) -> np.ndarray:
        """``L[k, i] = log l_i(s_k|theta) - log l_i(s_k|theta*)``, shape ``(T, n)``."""
        T = signals.shape[0]
        out = np.empty((T, self.n))
        for i in range(self.n):
            lg = model.log_tables[i]
            out[:, i] = lg[signals[:, i], theta] - lg[signals[:, i], theta_star]
        return out

    def replay(self, model: SignalModel, signals: np.ndarray, theta: int, theta_star: int) -> np.ndarray:
        """``psi_t = sum_{r<=t} A^(t-r) sum_{k<=r} L_k``, rows ``t = 0..T``."""
        inc = self.increments(model, signals, theta, theta_star)
        T = inc.shape[0]
        cumsum = np.cumsum(inc, axis=0)
        powers = np.empty((T, self.n, self.n))
        p = np.eye(self.n)
        for k in range(T):
            powers[k] = p
            p = p @ self.A
        psi = np.zeros((T + 1, self.n))
        for t in range(1, T + 1):
            # A^(t-r) for r = 1..t is powers[t-1], ..., powers[0]
            psi[t] = np.einsum("rij,rj->i", powers[t - 1::-1][:t], cumsum[:t])
        return psi


def trace_rows(trace: RoundTrace):
    """CSV rows ``(round, agent, kind, key, value)``; agent ids are 1-based."""
    labels = trace.labels
    m = len(labels)
    for t in range(trace.rounds + 1):
        for k, i in enumerate(trace.honest):
            s = trace.states[t, k]
            if trace.rule == "pairwise":
                for a in range(m):
                    for b in range(m):
                        if a != b:
                            yield t, i + 1, "ratio", f"{labels[a]}|{labels[b]}", repr(float(s[a, b]))
            elif trace.rule == "consensus":
                yield t, i + 1, "value", "x", repr(float(s))
            else:
                for a in range(m):
                    yield t, i + 1, "log_belief", labels[a], repr(float(s[a]))
        yield t, "", "diameter", "", repr(float(trace.diameters[t]))
    for t, i, name, value in trace.flags:
        yield t, i + 1, "flag", name, repr(float(value))


TRACE_HEADER = ("round", "agent", "kind", "key", "value")


def write_trace_csv(trace: RoundTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(trace_rows(trace))


class TraceFormatError(ValueError):
    pass


@dataclass
class TraceTable:
    """A trace read back from CSV."""

    kind: str
    rounds: int
    agents: list[int]
    keys: list[str]
    values: dict[tuple[int, str], np.ndarray]
    diameters: np.ndarray


def read_trace_csv(path: str | Path) -> TraceTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty trace file") from None
        if tuple(header) != TRACE_HEADER:
            raise TraceFormatError(f"{path}: bad header {header}")
        data: dict[tuple[int, str], dict[int, float]] = {}
        diam: dict[int, float] = {}
        kind = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise TraceFormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                t = int(row[0])
                value = float(row[4])
            except ValueError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc
            if row[2] == "diameter":
                diam[t] = value
            elif row[2] in ("log_belief", "ratio", "value"):
                kind = kind or row[2]
                data.setdefault((int(row[1]), row[3]), {})[t] = value
            elif row[2] != "flag":
                raise TraceFormatError(f"{path}:{lineno}: unknown kind {row[2]!r}")
    if kind is None:
        raise TraceFormatError(f"{path}: no state rows")
    rounds = max(diam) if diam else max(max(v) for v in data.values())
    values = {}
    for key, series in data.items():
        arr = np.full(rounds + 1, np.nan)
        for t, v in series.items():
            arr[t] = v
        values[key] = arr
    diameters = np.array([diam.get(t, np.nan) for t in range(rounds + 1)])
    agents = sorted({a for a, _ in values})
    keys = list(dict.fromkeys(k for _, k in values))
    return TraceTable(kind, rounds, agents, keys, values, diameters)
