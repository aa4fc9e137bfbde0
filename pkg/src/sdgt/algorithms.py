"""SD-GT and the SD-FedAvg / SCAFFOLD baselines.

Client quantities are stacked as ``(n, d)`` matrices in global client order,
so one D2D round over every subnet is a single product with the block
diagonal mixing matrix. Rounds are synchronous: all half-steps of round ``k``
are formed before any client mixes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diagnostics import MetricsRecord, compute_delta, compute_gamma, compute_y_z, round_cost
from .problems import FULL
from .rng import make_rng
from .topology import SubnetTopology

logger = logging.getLogger(__name__)

ALGORITHMS = ("SD-GT", "SD-FedAvg", "SCAFFOLD")


class DivergenceError(RuntimeError):
    """A client model left the divergence guard; ``records`` holds the partial run."""

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


class ConfigError(ValueError):
    pass


@dataclass
class Seeds:
    topology: int = 0
    data: int = 0
    sampling: int = 0
    batching: int = 0
    init: int = 0


@dataclass
class RunConfig:
    """One training run.

    Either ``h`` (per-subnet sample counts) or ``sample_rate`` picks the
    number of clients sampled per subnet; with a rate, ``h_s`` is
    ``round(rate * m_s)`` clipped to ``1..m_s``. Communication costs are per
    subnet: ``E`` for a device-server exchange with the whole subnet and
    ``E_d2d`` (or ``delta * E``) for one D2D round.
    """

    algorithm: str = "SD-GT"
    K: int = 10
    T: int = 100
    gamma: float = 1e-3
    h: Sequence[int] | None = None
    sample_rate: float | None = None
    batch_size: int | str = FULL
    seeds: Seeds = field(default_factory=Seeds)
    E: float | Sequence[float] = 1.0
    E_d2d: float | Sequence[float] | None = None
    delta: float = 1.0
    z_exchange_rounds: float = 0.0
    diagnostics: bool = True
    divergence_guard: float = 1e12
    record_wall_clock: bool = False

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        if int(self.T) != self.T or self.T < 0:
            raise ConfigError(f"T must be a non-negative integer, got {self.T}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.sample_rate is not None and not 0 < self.sample_rate <= 1:
            raise ConfigError(f"sample_rate must be in (0, 1], got {self.sample_rate}")
        if self.delta < 0 or self.z_exchange_rounds < 0:
            raise ConfigError("delta and z_exchange_rounds must be non-negative")

    def sample_counts(self, topology: SubnetTopology) -> list[int]:
        sizes = topology.sizes
        if self.h is not None:
            h = [int(v) for v in np.broadcast_to(self.h, (len(sizes),))]
        elif self.sample_rate is not None:
            h = [min(m, max(1, int(round(self.sample_rate * m)))) for m in sizes]
        else:
            h = list(sizes)
        for s, (hs, m) in enumerate(zip(h, sizes)):
            if not 1 <= hs <= m:
                raise ConfigError(f"subnet {s}: need 1 <= h_s <= m_s, got h_s={hs}, m_s={m}")
        return h

    def costs(self, topology: SubnetTopology) -> tuple[np.ndarray, np.ndarray]:
        E = np.broadcast_to(np.asarray(self.E, dtype=float), (topology.S,)).copy()
        if self.E_d2d is None:
            E_d2d = self.delta * E
        else:
            E_d2d = np.broadcast_to(np.asarray(self.E_d2d, dtype=float), (topology.S,)).copy()
        if (E < 0).any() or (E_d2d < 0).any():
            raise ConfigError("communication costs must be non-negative")
        return E, E_d2d


@dataclass
class ClientStates:
    """Stacked client variables: model, inter-/in-subnet trackers, round bookkeeping."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    x_round_start: np.ndarray
    z_accumulator: np.ndarray

    @classmethod
    def initial(cls, x0: np.ndarray, n: int) -> "ClientStates":
        x = np.tile(np.asarray(x0, dtype=float), (n, 1))
        zeros = np.zeros_like(x)
        return cls(x, zeros.copy(), zeros.copy(), x.copy(), zeros.copy())


@dataclass
class ServerState:
    x_g: np.ndarray
    psi: np.ndarray
    round: int = 1


@dataclass
class RoundTrace:
    """Everything the diagnostics need about one finished global round."""

    t: int
    iterates: np.ndarray | None  # (K, n, d): models used for the local steps
    round_end: np.ndarray  # x_i^{t,K+1} before broadcast
    x_g_prev: np.ndarray
    x_g: np.ndarray
    x: np.ndarray  # client models after broadcast
    y: np.ndarray
    z: np.ndarray
    psi: np.ndarray | None
    sampled: list[np.ndarray]


@dataclass
class RunResult:
    records: list[MetricsRecord]
    x_g: np.ndarray
    clients: ClientStates | None = None
    server: ServerState | None = None
    diverged: bool = False

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, item):
        return self.records[item]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


# ----------------------------------------------------------------------------
# SD-GT building blocks


def d2d_round(x, y, z, grads, W, gamma):
    """One adapt-then-combine step for every client.

    Returns ``(x_next, z_tilde)`` with ``x_half = x - gamma (g + y + z)``,
    ``x_next = W x_half`` and ``z_tilde = x_half - x + gamma y``.
    """
    x_half = x - gamma * (grads + y + z)
    z_tilde = x_half - x + gamma * y
    return W @ x_half, z_tilde


def update_in_subnet_tracker(z, z_accumulator, W, K, gamma):
    """``z += (acc - W acc) / (K gamma)`` where ``acc`` is the round's sum of ``z_tilde``."""
    if gamma <= 0 or K < 1:
        raise ConfigError("in-subnet tracker update needs gamma > 0 and K >= 1")
    return z + (z_accumulator - W @ z_accumulator) / (K * gamma)


def global_aggregate(x_g, psi, clients: ClientStates, sampled, K, gamma):
    """Server step for SD-GT.

    Sampled clients upload ``x_tilde = x^{t,K+1} - x^{t,1} + K gamma y``; the
    server averages per subnet, then across subnets, moves ``x_g`` by that
    average and sets ``psi_s = (subnet mean - global mean) / (K gamma)``.
    Sampled clients receive ``x_g`` and ``psi_s``; the rest keep ``x`` and ``y``.
    Returns the new ``(x_g, psi)`` and updates ``clients`` in place.
    """
    if gamma <= 0:
        raise ConfigError("global aggregation needs gamma > 0")
    subnet_means = np.stack([
        np.mean(clients.x[idx] - clients.x_round_start[idx] + K * gamma * clients.y[idx], axis=0)
        for idx in sampled
    ])
    x_tilde_g = subnet_means.mean(axis=0)
    x_g = x_g + x_tilde_g
    psi = (subnet_means - x_tilde_g) / (K * gamma)
    for s, idx in enumerate(sampled):
        clients.x[idx] = x_g
        clients.y[idx] = psi[s]
    return x_g, psi


# ----------------------------------------------------------------------------
# the training loop


def _sampler(config: RunConfig, topology: SubnetTopology):
    h = config.sample_counts(topology)
    rng = make_rng(config.seeds.sampling, "sampling")

    def draw():
        return [
            np.sort(idx[rng.choice(len(idx), size=hs, replace=False)])
            for idx, hs in zip(topology.subnets, h)
        ]

    return h, draw


def _check_inputs(config: RunConfig, topology: SubnetTopology, problem, expected: str):
    if config.algorithm != expected:
        raise ConfigError(f"config is for {config.algorithm}, not {expected}")
    if topology.n != problem.n:
        raise ConfigError(f"topology has {topology.n} clients but problem has {problem.n}")
    if len(set(topology.sizes)) > 1:
        logger.warning("unequal subnet sizes: equal subnet weighting no longer matches (1/n) sum f_i")


class _Recorder:
    def __init__(self, config, topology, problem, observer):
        self.config = config
        self.problem = problem
        self.subnet_of = topology.subnet_of()
        self.observer = observer
        self.records: list[MetricsRecord] = []
        E, E_d2d = config.costs(topology)
        self.h = config.sample_counts(topology)
        self.sizes = topology.sizes
        self.E, self.E_d2d = E, E_d2d
        self.cost = 0.0
        self.start = time.perf_counter()

    def round_cost(self, d2d: bool) -> float:
        extra = self.config.z_exchange_rounds if self.config.algorithm == "SD-GT" else 0.0
        return round_cost(self.config.K, self.h, self.sizes, self.E, self.E_d2d,
                          d2d=d2d, extra_d2d_rounds=extra)

    def emit(self, trace: RoundTrace, d2d: bool = True):
        self.cost += self.round_cost(d2d)
        p, x_g = self.problem, trace.x_g
        G = p.full_grads_at(x_g)
        grad = G.mean(axis=0)
        x_star = getattr(p, "x_star", None)
        dist = float(np.sum((x_g - x_star) ** 2)) if x_star is not None else float("nan")
        if self.config.diagnostics:
            delta = compute_delta(trace.iterates, trace.x_g_prev)
            gamma_term = compute_gamma(trace.round_end, x_g)
            Y, Z = compute_y_z(trace.y, trace.z, G, self.subnet_of)
        else:
            delta = gamma_term = Y = Z = float("nan")
        wall = time.perf_counter() - self.start if self.config.record_wall_clock else 0.0
        rec = MetricsRecord(trace.t, p.loss(x_g), float(grad @ grad), dist,
                            delta, gamma_term, Y, Z, self.cost, wall)
        self.records.append(rec)
        if self.observer is not None:
            self.observer(trace)
        return rec

    def guard(self, x):
        limit = self.config.divergence_guard
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > limit:
            raise DivergenceError(
                f"{self.config.algorithm} diverged: a client model exceeded {limit:g}",
                self.records,
            )


def _initial_point(config: RunConfig, problem, x0):
    if x0 is not None:
        return np.asarray(x0, dtype=float)
    return problem.initial_point(config.seeds.init)


def run_sdgt(config: RunConfig, topology: SubnetTopology, problem, x0=None,
             observer: Callable[[RoundTrace], None] | None = None) -> RunResult:
    """Semi-decentralized gradient tracking.

    Each global round runs ``K`` D2D rounds with both trackers applied, then
    updates the in-subnet tracker from the round's mixing residuals, then
    aggregates the sampled clients at the server.
    """
    _check_inputs(config, topology, problem, "SD-GT")
    n, K, gamma = topology.n, config.K, config.gamma
    W = topology.mixing_matrix()
    x_init = _initial_point(config, problem, x0)
    clients = ClientStates.initial(x_init, n)
    server = ServerState(x_init.copy(), np.zeros((topology.S, x_init.size)))
    _, draw = _sampler(config, topology)
    batch_rng = make_rng(config.seeds.batching, "batching")
    rec = _Recorder(config, topology, problem, observer)

    for t in range(1, config.T + 1):
        clients.x_round_start = clients.x.copy()
        clients.z_accumulator = np.zeros_like(clients.x)
        iterates = [] if config.diagnostics else None
        for _ in range(K):
            if iterates is not None:
                iterates.append(clients.x)
            grads = problem.grads(clients.x, config.batch_size, batch_rng)
            clients.x, z_tilde = d2d_round(clients.x, clients.y, clients.z, grads, W, gamma)
            clients.z_accumulator += z_tilde
            rec.guard(clients.x)
        if gamma > 0:
            clients.z = update_in_subnet_tracker(clients.z, clients.z_accumulator, W, K, gamma)
        round_end = clients.x.copy()
        sampled = draw()
        x_g_prev = server.x_g
        if gamma > 0:
            server.x_g, server.psi = global_aggregate(server.x_g, server.psi, clients, sampled, K, gamma)
        else:
            for idx in sampled:
                clients.x[idx] = server.x_g
        server.round = t + 1
        rec.emit(RoundTrace(t, None if iterates is None else np.stack(iterates), round_end,
                            x_g_prev, server.x_g, clients.x, clients.y, clients.z,
                            server.psi, sampled))
    return RunResult(rec.records, server.x_g, clients, server)


def run_sd_fedavg(config: RunConfig, topology: SubnetTopology, problem, x0=None,
                  observer: Callable[[RoundTrace], None] | None = None) -> RunResult:
    """Semi-decentralized FedAvg: ATC gossip steps with no trackers.

    The server replaces ``x_g`` by the mean over subnets of the sampled
    clients' subnet means and broadcasts it to the sampled clients.
    """
    _check_inputs(config, topology, problem, "SD-FedAvg")
    n, K, gamma = topology.n, config.K, config.gamma
    W = topology.mixing_matrix()
    x_init = _initial_point(config, problem, x0)
    x = np.tile(x_init, (n, 1))
    zeros = np.zeros_like(x)
    x_g = x_init.copy()
    _, draw = _sampler(config, topology)
    batch_rng = make_rng(config.seeds.batching, "batching")
    rec = _Recorder(config, topology, problem, observer)

    for t in range(1, config.T + 1):
        iterates = [] if config.diagnostics else None
        for _ in range(K):
            if iterates is not None:
                iterates.append(x)
            grads = problem.grads(x, config.batch_size, batch_rng)
            x = W @ (x - gamma * grads)
            rec.guard(x)
        round_end = x.copy()
        sampled = draw()
        x_g_prev = x_g
        x_g = np.mean([x[idx].mean(axis=0) for idx in sampled], axis=0)
        for idx in sampled:
            x[idx] = x_g
        rec.emit(RoundTrace(t, None if iterates is None else np.stack(iterates), round_end,
                            x_g_prev, x_g, x, zeros, zeros, None, sampled))
    return RunResult(rec.records, x_g)


def run_scaffold(config: RunConfig, topology: SubnetTopology, problem, x0=None,
                 observer: Callable[[RoundTrace], None] | None = None) -> RunResult:
    """SCAFFOLD with the iterate-difference control-variate update.

    Sampled clients start from ``x_g``, take ``K`` local steps
    ``x -= gamma (g_i + c - c_i)`` without any D2D mixing, then set
    ``c_i <- c_i - c + (x_g - x) / (K gamma)``. The server averages model
    updates across subnets like SD-GT and moves ``c`` by ``(1/n)`` times the
    sum of control-variate changes. Unsampled clients idle.
    Diagnostics report ``c - c_i`` as the inter-subnet tracker and zero as
    the in-subnet tracker.
    """
    _check_inputs(config, topology, problem, "SCAFFOLD")
    n, K, gamma = topology.n, config.K, config.gamma
    x_init = _initial_point(config, problem, x0)
    x = np.tile(x_init, (n, 1))
    c_i = np.zeros_like(x)
    c = np.zeros_like(x_init)
    zeros = np.zeros_like(x)
    x_g = x_init.copy()
    _, draw = _sampler(config, topology)
    batch_rng = make_rng(config.seeds.batching, "batching")
    rec = _Recorder(config, topology, problem, observer)

    for t in range(1, config.T + 1):
        sampled = draw()
        active = np.zeros(n, dtype=bool)
        active[np.concatenate(sampled)] = True
        x[active] = x_g
        iterates = [] if config.diagnostics else None
        for _ in range(K):
            if iterates is not None:
                iterates.append(x)
            grads = problem.grads(x, config.batch_size, batch_rng)
            x = np.where(active[:, None], x - gamma * (grads + c - c_i), x)
            rec.guard(x)
        round_end = x.copy()
        x_g_prev = x_g
        if gamma > 0:
            c_new = c_i[active] - c + (x_g - x[active]) / (K * gamma)
            c = c + (c_new - c_i[active]).sum(axis=0) / n
            c_i[active] = c_new
        x_g = x_g + np.mean([(x[idx] - x_g_prev).mean(axis=0) for idx in sampled], axis=0)
        x[active] = x_g
        rec.emit(RoundTrace(t, None if iterates is None else np.stack(iterates), round_end,
                            x_g_prev, x_g, x, c - c_i, zeros, None, sampled), d2d=False)
    return RunResult(rec.records, x_g)


RUNNERS = {"SD-GT": run_sdgt, "SD-FedAvg": run_sd_fedavg, "SCAFFOLD": run_scaffold}


def run(config: RunConfig, topology: SubnetTopology, problem, **kw) -> RunResult:
    """Dispatch on ``config.algorithm``."""
    return RUNNERS[config.algorithm](config, topology, problem, **kw)
