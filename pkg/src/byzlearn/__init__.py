"""Byzantine fault-tolerant non-Bayesian learning over directed networks."""

from .adversary import KINDS, StrategySpec, SystemView, craft_messages
from .consensus import (
    DegenerateInputError,
    ReceivedMultiset,
    TverbergResult,
    hull_distance,
    one_iter,
    one_iter_many,
    trimmed_scalar_round,
    tverberg_point,
)
from .graph import (
    AssumptionError,
    Digraph,
    ReducedGraph,
    ResourceLimitError,
    TopologyReport,
    check_identifiability,
    check_topology,
    enumerate_reduced_graphs,
    reduced_graph_count,
    sample_topology,
    source_components,
)
from .learning import (
    BeliefState,
    PairwiseRatios,
    belief_decide,
    bfl_step,
    ff_bfl_step,
    pairwise_decide,
    pairwise_step,
)
from .signals import SignalModel, c0, c1, kl_divergence, sample_signal
from .sim import (
    MatrixReplay,
    RoundTrace,
    ScenarioConfig,
    consensus_diameter,
    fit_quadratic,
    fit_quadratic_decay,
    load_scenario,
    run_scenario,
)

__version__ = "0.1.0"
