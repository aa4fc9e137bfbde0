"""Per-round convergence metrics and Lyapunov-style diagnostics.

All functions here are pure: they take iterates, trackers and gradients as
arrays (client index on axis 0 for ``(n, d)`` matrices) and return floats.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

CSV_COLUMNS = (
    "t", "loss", "grad_norm_sq", "dist_to_opt_sq", "Delta", "Gamma", "Y", "Z",
    "comm_cost_cum", "wall_clock",
)


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    loss: float
    grad_norm_sq: float
    dist_to_opt_sq: float
    Delta: float
    Gamma: float
    Y: float
    Z: float
    comm_cost_cum: float
    wall_clock: float = 0.0

    def as_row(self) -> list[str]:
        return [str(self.t)] + [repr(float(v)) for v in astuple(self)[1:]]


assert tuple(f.name for f in fields(MetricsRecord)) == CSV_COLUMNS


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow(rec.as_row())
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    return [
        MetricsRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader if row
    ]


def compute_delta(iterates: np.ndarray, x_g: np.ndarray) -> float:
    """Client drift: ``(1/n) sum_i sum_k ||x_i^{t,k} - x_g^t||^2``.

    ``iterates`` has shape ``(K, n, d)`` and holds the models each client
    used for its ``K`` local steps in the round.
    """
    iterates = np.asarray(iterates, dtype=float)
    n = iterates.shape[1]
    return float(np.sum((iterates - x_g) ** 2) / n)


def compute_gamma(round_end: np.ndarray, x_g: np.ndarray) -> float:
    """Sampling error: mean squared distance of round-end models to the new global model.

    ``round_end`` holds ``x_i^{t-1,K+1}`` (before broadcast) and ``x_g`` is
    the global model produced by that aggregation.
    """
    round_end = np.asarray(round_end, dtype=float)
    return float(np.sum((round_end - x_g) ** 2) / round_end.shape[0])


def averaging_matrices(subnet_of: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(J_c, J)``: within-subnet and network-wide averaging matrices."""
    subnet_of = np.asarray(subnet_of)
    n = len(subnet_of)
    same = subnet_of[:, None] == subnet_of[None, :]
    sizes = np.bincount(subnet_of)[subnet_of]
    return same / sizes[:, None], np.full((n, n), 1.0 / n)


def compute_y_z(y: np.ndarray, z: np.ndarray, grads_at_xg: np.ndarray, subnet_of) -> tuple[float, float]:
    """Inter- and in-subnet correction terms ``(Y, Z)``.

    With clients as rows, ``Z = (1/n)||z + (I - J_c) G||_F^2`` and
    ``Y = (1/n)||y + (J_c - J) G||_F^2`` where ``G`` stacks every client's
    full gradient at the current global model.
    """
    G = np.asarray(grads_at_xg, dtype=float)
    n = G.shape[0]
    Jc, J = averaging_matrices(subnet_of)
    subnet_mean = Jc @ G
    Z = np.sum((z + G - subnet_mean) ** 2) / n
    Y = np.sum((y + subnet_mean - J @ G) ** 2) / n
    return float(Y), float(Z)


def round_cost(K: int, h, m, E, E_d2d, d2d: bool = True, extra_d2d_rounds: float = 0.0) -> float:
    """Communication cost of one global round.

    ``K * sum_s E_s^D2D`` for the D2D rounds plus ``sum_s (h_s / m_s) E_s``
    for device-server exchanges with the sampled fraction of each subnet.
    """
    h, m, E, E_d2d = (np.asarray(v, dtype=float) for v in (h, m, E, E_d2d))
    if (E < 0).any() or (E_d2d < 0).any():
        raise ValueError("communication costs must be non-negative")
    if (h < 1).any() or (h > m).any():
        raise ValueError("sample counts must satisfy 1 <= h_s <= m_s")
    ds = float(np.sum(h / m * E))
    if not d2d:
        return ds
    return (K + extra_d2d_rounds) * float(np.sum(E_d2d)) + ds


def communication_cost(rounds: int, K: int, h, m, E, E_d2d=None, delta=None, **kw) -> float:
    """Cumulative cost of ``rounds`` identical global rounds.

    Give either explicit ``E_d2d`` or the ratio ``delta`` (``E_d2d = delta * E``).
    """
    if E_d2d is None:
        if delta is None:
            raise ValueError("need E_d2d or delta")
        if delta < 0:
            raise ValueError("delta must be non-negative")
        E_d2d = delta * np.asarray(E, dtype=float)
    return rounds * round_cost(K, h, m, E, E_d2d, **kw)


def log_slope(values, start_fraction: float = 0.5) -> float:
    """Least-squares slope of ``log(values)`` against round index over the tail."""
    values = np.asarray(values, dtype=float)
    start = int(math.floor(len(values) * start_fraction))
    tail = values[start:]
    t = np.arange(start, len(values), dtype=float)
    keep = tail > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(t[keep], np.log(tail[keep]), 1)[0])
