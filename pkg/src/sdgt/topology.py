"""Subnet graphs, Metropolis-Hastings mixing matrices and spectral mixing rates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .rng import make_rng

logger = logging.getLogger(__name__)

REGION_SIDE = 2.0
DEFAULT_MAX_RETRIES = 1000
STOCHASTIC_TOL = 1e-12


class TopologyError(ValueError):
    pass


def _is_connected(adjacency: np.ndarray) -> bool:
    if adjacency.shape[0] <= 1:
        return True
    n_components, _ = connected_components(adjacency.astype(np.int8), directed=False)
    return n_components == 1


def generate_geometric_subnet(
    m: int, radius: float, rng_seed: int, max_retries: int = DEFAULT_MAX_RETRIES
) -> np.ndarray:
    """Sample a connected random geometric graph on ``m`` nodes.

    Nodes are placed uniformly in ``[0, 2] x [0, 2]`` and joined when their
    Euclidean distance is at most ``radius``. Disconnected draws are rejected
    and redrawn from the same stream.

    Returns
    -------
    ndarray of bool, shape (m, m)
        Symmetric adjacency with an empty diagonal.
    """
    if m < 1:
        raise TopologyError(f"subnet size must be >= 1, got {m}")
    if radius <= 0:
        raise TopologyError(f"radius must be positive, got {radius}")
    rng = make_rng(rng_seed, "topology")
    for _ in range(max_retries):
        points = rng.uniform(0.0, REGION_SIDE, size=(m, 2))
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        adjacency = dist <= radius
        np.fill_diagonal(adjacency, False)
        if _is_connected(adjacency):
            return adjacency
    raise TopologyError(
        f"cannot produce connected graph with m={m}, radius={radius} "
        f"after {max_retries} draws"
    )


def _check_adjacency(adjacency: np.ndarray) -> np.ndarray:
    adjacency = np.asarray(adjacency).astype(bool)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise TopologyError(f"adjacency must be square, got shape {adjacency.shape}")
    if not np.array_equal(adjacency, adjacency.T):
        raise TopologyError("adjacency must be symmetric")
    if adjacency.diagonal().any():
        raise TopologyError("adjacency must have an empty diagonal")
    if not _is_connected(adjacency):
        raise TopologyError("adjacency graph is disconnected")
    return adjacency


def metropolis_hastings_weights(adjacency: np.ndarray) -> np.ndarray:
    """Metropolis-Hastings weights: ``w_ij = 1 / (1 + max(deg_i, deg_j))`` on edges.

    The diagonal absorbs the remainder so every row sums to one; the result
    is symmetric and therefore doubly stochastic.
    """
    adjacency = _check_adjacency(adjacency)
    m = adjacency.shape[0]
    deg = adjacency.sum(axis=1)
    W = np.zeros((m, m))
    rows, cols = np.nonzero(adjacency)
    W[rows, cols] = 1.0 / (1.0 + np.maximum(deg[rows], deg[cols]))
    W[np.arange(m), np.arange(m)] = 1.0 - W.sum(axis=1)
    return W


def mixing_rate(W: np.ndarray) -> float:
    """Return ``rho = 1 - ||W - J||_2^2`` for a doubly stochastic ``W``.

    Raises if ``||W - J||_2 >= 1``, which means the support is disconnected
    (or periodic) and gossip never contracts disagreement.
    """
    W = np.asarray(W, dtype=float)
    m = W.shape[0]
    J = np.full((m, m), 1.0 / m)
    if np.allclose(W, W.T, rtol=0.0, atol=1e-14):
        # symmetric: spectral norm is the largest |eigenvalue|
        norm = float(np.max(np.abs(np.linalg.eigvalsh(W - J)))) if m > 1 else 0.0
    else:
        norm = float(np.linalg.norm(W - J, ord=2))
    if norm >= 1.0 - 1e-12:
        raise TopologyError(
            f"||W - J||_2 = {norm:.6g} >= 1: support is disconnected or periodic"
        )
    return 1.0 - norm**2


def verify_mixing_inequality(
    W: np.ndarray, rho: float, trials: int = 1000, rng_seed: int = 0, rows: int = 8
) -> bool:
    """Check ``||X(W - J)||_F^2 <= (1 - rho) ||X(I - J)||_F^2`` on random ``X``.

    ``X`` has standard normal entries and shape ``(rows, m)``. Violations
    are logged with the worst observed ratio.
    """
    W = np.asarray(W, dtype=float)
    m = W.shape[0]
    J = np.full((m, m), 1.0 / m)
    rng = make_rng(rng_seed, "check")
    X = rng.standard_normal((trials, rows, m))
    lhs = np.sum((X @ (W - J)) ** 2, axis=(1, 2))
    spread = np.sum((X @ (np.eye(m) - J)) ** 2, axis=(1, 2))
    rhs = (1.0 - rho) * spread
    # roundoff slack: W = J (complete graph) leaves ~eps^2 residue with rhs = 0
    ok = lhs <= rhs * (1.0 + 1e-9) + 1e-20 * spread
    if not ok.all():
        worst = int(np.argmax(lhs - rhs))
        logger.warning(
            "mixing inequality violated in %d/%d trials (worst lhs=%.6g, rhs=%.6g)",
            int((~ok).sum()), trials, lhs[worst], rhs[worst],
        )
        return False
    return True


@dataclass
class SubnetTopology:
    """Disjoint client groups, each with its own gossip graph.

    ``subnets[s]`` holds the global client indices of subnet ``s``; local
    node ``a`` of subnet ``s`` is client ``subnets[s][a]``.
    """

    subnets: list[np.ndarray]
    adjacency: list[np.ndarray]
    W: list[np.ndarray]
    rho: list[float]
    radii: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.subnets = [np.asarray(s, dtype=int) for s in self.subnets]
        self.adjacency = [np.asarray(a, dtype=bool) for a in self.adjacency]
        self.W = [np.asarray(w, dtype=float) for w in self.W]
        self.rho = [float(r) for r in self.rho]
        self.validate()

    @property
    def n(self) -> int:
        return int(sum(len(s) for s in self.subnets))

    @property
    def S(self) -> int:
        return len(self.subnets)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.subnets]

    def validate(self) -> None:
        if not (len(self.subnets) == len(self.adjacency) == len(self.W) == len(self.rho)):
            raise TopologyError("per-subnet fields have mismatched lengths")
        members = np.concatenate(self.subnets) if self.subnets else np.array([], int)
        if len(members) == 0 or any(len(s) == 0 for s in self.subnets):
            raise TopologyError("empty subnet")
        if not np.array_equal(np.sort(members), np.arange(len(members))):
            raise TopologyError("subnets must partition clients 0..n-1")
        for s, (idx, A, W, rho) in enumerate(
            zip(self.subnets, self.adjacency, self.W, self.rho)
        ):
            m = len(idx)
            if A.shape != (m, m) or W.shape != (m, m):
                raise TopologyError(f"subnet {s}: matrix shape does not match size {m}")
            if (W < 0).any():
                raise TopologyError(f"subnet {s}: negative mixing weight")
            if np.abs(W.sum(axis=0) - 1).max() > STOCHASTIC_TOL or \
                    np.abs(W.sum(axis=1) - 1).max() > STOCHASTIC_TOL:
                raise TopologyError(f"subnet {s}: W is not doubly stochastic")
            off_support = (W != 0) & ~A & ~np.eye(m, dtype=bool)
            if off_support.any():
                raise TopologyError(f"subnet {s}: weight on a non-edge")
            if not 0.0 < rho <= 1.0:
                raise TopologyError(f"subnet {s}: rho={rho} outside (0, 1]")

    def subnet_of(self) -> np.ndarray:
        """Subnet label of every client, shape ``(n,)``."""
        label = np.empty(self.n, dtype=int)
        for s, idx in enumerate(self.subnets):
            label[idx] = s
        return label

    def mixing_matrix(self) -> np.ndarray:
        """Network-wide block-diagonal ``W`` in global client order."""
        full = np.zeros((self.n, self.n))
        for idx, W in zip(self.subnets, self.W):
            full[np.ix_(idx, idx)] = W
        return full

    def subnet_averaging(self) -> np.ndarray:
        """Block-diagonal within-subnet averaging matrix ``J_c``."""
        full = np.zeros((self.n, self.n))
        for idx in self.subnets:
            full[np.ix_(idx, idx)] = 1.0 / len(idx)
        return full

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "subnets": [
                {
                    "members": idx.tolist(),
                    "radius": self.radii[s] if s < len(self.radii) else None,
                    "edges": [[int(a), int(b)] for a, b in zip(*np.nonzero(np.triu(A)))],
                    "W": W.tolist(),
                    "rho": rho,
                }
                for s, (idx, A, W, rho) in enumerate(
                    zip(self.subnets, self.adjacency, self.W, self.rho)
                )
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SubnetTopology":
        subnets, adjacency, Ws, rhos, radii = [], [], [], [], []
        for entry in doc["subnets"]:
            m = len(entry["members"])
            A = np.zeros((m, m), dtype=bool)
            for a, b in entry["edges"]:
                A[a, b] = A[b, a] = True
            subnets.append(entry["members"])
            adjacency.append(A)
            Ws.append(np.array(entry["W"], dtype=float))
            rhos.append(entry["rho"])
            radii.append(entry.get("radius"))
        return cls(subnets, adjacency, Ws, rhos, radii)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SubnetTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_topology(
    n: int,
    S: int,
    rng_seed: int,
    radius_range: tuple[float, float] = (0.5, 3.5),
    sizes: list[int] | None = None,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> SubnetTopology:
    """Partition ``n`` clients into ``S`` contiguous subnets with geometric graphs.

    Each subnet draws its radius uniformly from ``radius_range``. Subnets are
    equal-sized unless ``sizes`` is given.
    """
    if sizes is None:
        if n % S:
            raise TopologyError(f"n={n} is not divisible by S={S}")
        sizes = [n // S] * S
    if len(sizes) != S or sum(sizes) != n:
        raise TopologyError(f"sizes {sizes} do not sum to n={n} over S={S} subnets")
    rng = make_rng(rng_seed, "topology", 0)
    radii = rng.uniform(radius_range[0], radius_range[1], size=S).tolist()
    starts = np.concatenate([[0], np.cumsum(sizes)])
    subnets, adjacency, Ws, rhos = [], [], [], []
    for s in range(S):
        sub_seed = int(make_rng(rng_seed, "topology", 1, s).integers(2**62))
        A = generate_geometric_subnet(sizes[s], radii[s], sub_seed, max_retries)
        W = metropolis_hastings_weights(A)
        subnets.append(np.arange(starts[s], starts[s + 1]))
        adjacency.append(A)
        Ws.append(W)
        rhos.append(mixing_rate(W))
    return SubnetTopology(subnets, adjacency, Ws, rhos, radii)
