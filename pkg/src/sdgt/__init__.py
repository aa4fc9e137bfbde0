"""Semi-decentralized federated learning with hierarchical gradient tracking.

A deterministic desk-scale simulator: subnet topologies with gossip mixing,
per-client loss oracles, the SD-GT trainer and its SD-FedAvg / SCAFFOLD
baselines, per-round diagnostics, and the sampling / D2D-round co-optimizer.
"""

__version__ = "0.1.0"

from .rng import make_rng
from .topology import (
    SubnetTopology,
    build_topology,
    generate_geometric_subnet,
    metropolis_hastings_weights,
    mixing_rate,
    verify_mixing_inequality,
)
from .problems import (
    FULL,
    ClusterClassificationProblem,
    LeastSquaresProblem,
    condition_number,
    generate_cluster_classification,
    generate_least_squares,
    stochastic_gradient,
)
from .diagnostics import MetricsRecord
from .algorithms import (
    DivergenceError,
    RunConfig,
    run,
    run_scaffold,
    run_sd_fedavg,
    run_sdgt,
)
from .cooptimizer import CoOptProblem, CoOptSolution, objective, solve, solve_relaxed

__all__ = [
    "FULL",
    "ClusterClassificationProblem",
    "CoOptProblem",
    "CoOptSolution",
    "DivergenceError",
    "LeastSquaresProblem",
    "MetricsRecord",
    "RunConfig",
    "SubnetTopology",
    "build_topology",
    "condition_number",
    "generate_cluster_classification",
    "generate_geometric_subnet",
    "generate_least_squares",
    "make_rng",
    "metropolis_hastings_weights",
    "mixing_rate",
    "objective",
    "run",
    "run_scaffold",
    "run_sd_fedavg",
    "run_sdgt",
    "solve",
    "solve_relaxed",
    "stochastic_gradient",
    "verify_mixing_inequality",
]
