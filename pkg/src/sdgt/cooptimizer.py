"""Learning/communication trade-off over per-subnet sample counts and D2D rounds.

The score of a configuration is

    1/p^4 + l1 sqrt(1/K) + l2 (1/(K p^2))^(2/3)
          + l3 sum_s (1 - beta_s) E_s + l4 K sum_s E_s^D2D

with ``beta_s = (m_s - h_s) / m_s`` the unsampled fraction of subnet ``s`` and
``p = min_s (1 - beta_s^2)``. :func:`solve` finds the exact minimizer over
integer ``h_s`` and ``K``; :func:`solve_relaxed` solves the continuous
relaxation, which is a geometric program in ``(p, 1 - beta_s, K)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar


class CoOptError(ValueError):
    pass


@dataclass
class CoOptProblem:
    m: Sequence[int]
    E: Sequence[float]
    E_d2d: Sequence[float] | None = None
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 0.1, 0.01)
    K_max: int = 50
    delta: float | None = None

    def __post_init__(self):
        self.m = [int(v) for v in self.m]
        self.E = [float(v) for v in self.E]
        if self.E_d2d is None:
            if self.delta is None:
                raise CoOptError("give E_d2d or delta")
            self.E_d2d = [self.delta * e for e in self.E]
        self.E_d2d = [float(v) for v in self.E_d2d]
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if not (len(self.m) == len(self.E) == len(self.E_d2d)) or not self.m:
            raise CoOptError("m, E and E_d2d must be non-empty and of equal length")
        if min(self.m) < 1:
            raise CoOptError(f"subnet sizes must be >= 1, got {self.m}")
        if min(self.E) <= 0 or min(self.E_d2d) <= 0:
            raise CoOptError("communication costs must be positive")
        if len(self.lambdas) != 4 or min(self.lambdas) < 0:
            raise CoOptError(f"need four non-negative balance terms, got {self.lambdas}")
        if int(self.K_max) != self.K_max or self.K_max < 1:
            raise CoOptError(f"K_max must be a positive integer, got {self.K_max}")
        self.K_max = int(self.K_max)

    @property
    def S(self) -> int:
        return len(self.m)

    @classmethod
    def from_dict(cls, doc: dict) -> "CoOptProblem":
        return cls(**{k: doc[k] for k in ("m", "E", "E_d2d", "lambdas", "K_max", "delta") if k in doc})


@dataclass
class CoOptSolution:
    h: list[int]
    beta: list[float]
    p: float
    K: int
    objective_value: float
    round_cost: float = 0.0

    def key(self):
        return (self.objective_value, self.round_cost, self.K, tuple(self.h))


@dataclass
class RelaxedSolution:
    p: float
    beta: list[float]
    K: float
    objective_value: float
    constraint_active: bool
    rounded: CoOptSolution = field(repr=False)


def objective(beta, p, K, problem: CoOptProblem) -> float:
    """Trade-off score at ``(beta, p, K)``.

    ``p`` must satisfy ``0 < p <= min_s(1 - beta_s^2)``; the discrete problem
    uses equality, the relaxation allows slack.
    """
    beta = np.asarray(beta, dtype=float)
    caps = np.array([(m - 1) / m for m in problem.m])
    if p <= 0:
        raise CoOptError(f"p must be positive, got {p}")
    if (beta < -1e-12).any() or (beta > caps + 1e-12).any():
        raise CoOptError(f"beta {beta.tolist()} outside [0, (m_s - 1)/m_s]")
    if p > np.min(1.0 - beta**2) + 1e-12:
        raise CoOptError(f"p={p} exceeds min_s(1 - beta_s^2)")
    if K < 1:
        raise CoOptError(f"K must be >= 1, got {K}")
    l1, l2, l3, l4 = problem.lambdas
    return (
        p ** -4
        + l1 * math.sqrt(1.0 / K)
        + l2 * (1.0 / (K * p**2)) ** (2.0 / 3.0)
        + l3 * float(np.sum((1.0 - beta) * np.asarray(problem.E)))
        + l4 * K * float(np.sum(problem.E_d2d))
    )


def _betas(h, problem):
    return [(m - hs) / m for m, hs in zip(problem.m, h)]


def _round_cost(beta, K, problem) -> float:
    return float(np.sum((1.0 - np.asarray(beta)) * np.asarray(problem.E))) + K * float(np.sum(problem.E_d2d))


def evaluate(h, K, problem: CoOptProblem) -> CoOptSolution:
    """Score an integer configuration ``(h, K)``."""
    if len(h) != problem.S or any(not 1 <= hs <= m for hs, m in zip(h, problem.m)):
        raise CoOptError(f"h={list(h)} infeasible for m={problem.m}")
    if not 1 <= K <= problem.K_max:
        raise CoOptError(f"K={K} outside 1..{problem.K_max}")
    beta = _betas(h, problem)
    p = min(1.0 - b * b for b in beta)
    return CoOptSolution(list(map(int, h)), beta, p, int(K),
                         objective(beta, p, K, problem), _round_cost(beta, K, problem))


def _phi(m, h):
    b = (m - h) / m
    return 1.0 - b * b


def _counts_for(p, problem) -> list[int]:
    # fewest samples per subnet whose sample-wise mixing rate reaches p
    return [next(h for h in range(1, m + 1) if _phi(m, h) >= p) for m in problem.m]


def candidate_configs(problem: CoOptProblem) -> list[list[int]]:
    ps = sorted({_phi(m, h) for m in problem.m for h in range(1, m + 1)})
    configs, seen = [], set()
    for p in ps:
        h = _counts_for(p, problem)
        if tuple(h) not in seen:
            seen.add(tuple(h))
            configs.append(h)
    return configs


def solve(problem: CoOptProblem) -> CoOptSolution:
    """Exact minimizer over ``h_s in 1..m_s`` and ``K in 1..K_max``.

    For a fixed ``p`` the cheapest feasible choice samples the fewest clients
    with ``1 - beta_s^2 >= p``, so only the finitely many achievable ``p``
    values need scanning. Ties go to the lower round cost, then smaller ``K``,
    then the lexicographically smaller ``h``.
    """
    best = None
    for h in candidate_configs(problem):
        for K in range(1, problem.K_max + 1):
            sol = evaluate(h, K, problem)
            if best is None or sol.key() < best.key():
                best = sol
    return best


def brute_force(problem: CoOptProblem) -> CoOptSolution:
    """Score every point of the feasible grid; used as an oracle."""
    best = None
    for h in itertools.product(*(range(1, m + 1) for m in problem.m)):
        for K in range(1, problem.K_max + 1):
            sol = evaluate(list(h), K, problem)
            if best is None or sol.key() < best.key():
                best = sol
    return best


def _golden_min(f, lo, hi, tol=1e-12):
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": tol})
    cands = [(float(res.fun), float(res.x)), (f(lo), lo), (f(hi), hi)]
    return min(cands)


def solve_relaxed(problem: CoOptProblem) -> RelaxedSolution:
    """Continuous relaxation with real ``beta_s`` and real ``K``.

    For fixed ``p`` the best ``beta_s`` is ``min(sqrt(1 - p), (m_s - 1)/m_s)``
    and the best ``K`` solves a one-dimensional convex problem in ``log K``.
    The remaining function of ``log p`` is convex (partial minimization of a
    geometric program), so a bounded scalar search over ``log p`` finds it;
    the achievable discrete ``p`` values are also scanned so the relaxed
    value never exceeds the discrete optimum. The relaxed point is then
    rounded to the best neighbouring integer configuration.
    """
    l1, l2, l3, l4 = problem.lambdas
    caps = np.array([(m - 1) / m for m in problem.m])
    E = np.asarray(problem.E)
    d2d = float(np.sum(problem.E_d2d))
    Ks = np.arange(1, problem.K_max + 1, dtype=float)

    def k_terms(K, p):
        return l1 * np.sqrt(1.0 / K) + l2 * (1.0 / (K * p**2)) ** (2.0 / 3.0) + l4 * K * d2d

    def best_k(p):
        val, logk = _golden_min(lambda u: float(k_terms(math.exp(u), p)), 0.0, math.log(problem.K_max))
        grid = k_terms(Ks, p)
        i = int(np.argmin(grid))
        return (val, math.exp(logk)) if val <= grid[i] else (float(grid[i]), float(Ks[i]))

    def beta_of(p):
        return np.minimum(math.sqrt(max(1.0 - p, 0.0)), caps)

    def phi(p):
        return p ** -4 + best_k(p)[0] + l3 * float(np.sum((1.0 - beta_of(p)) * E))

    p_lo = float(np.min(1.0 - caps**2))
    if p_lo >= 1.0:
        p_best = 1.0
    else:
        val, logp = _golden_min(lambda u: phi(math.exp(u)), math.log(p_lo), 0.0)
        p_best = math.exp(logp)
        ps = sorted({_phi(m, h) for m in problem.m for h in range(1, m + 1)})
        for p in ps:
            if p >= p_lo and phi(p) < phi(p_best):
                p_best = p
    beta = beta_of(p_best)
    K_best = best_k(p_best)[1]
    value = phi(p_best)
    active = bool(abs(np.min(1.0 - beta**2) - p_best) <= 1e-9)

    h_real = np.array(problem.m) * (1.0 - beta)
    h_opts = [sorted({min(m, max(1, int(math.floor(x)))), min(m, max(1, int(math.ceil(x))))})
              for m, x in zip(problem.m, h_real)]
    K_opts = sorted({min(problem.K_max, max(1, int(math.floor(K_best)))),
                     min(problem.K_max, max(1, int(math.ceil(K_best))))})
    rounded = min((evaluate(list(h), K, problem) for h in itertools.product(*h_opts) for K in K_opts),
                  key=CoOptSolution.key)
    return RelaxedSolution(p_best, beta.tolist(), K_best, value, active, rounded)


def pareto_frontier(problem: CoOptProblem) -> list[CoOptSolution]:
    """Configurations not dominated in (round cost, learning term).

    The learning term is the score without its two cost terms. Only the
    fewest-samples configuration per achievable ``p`` is considered, since
    any other has the same learning term at higher cost.
    """
    points = []
    for h in candidate_configs(problem):
        for K in range(1, problem.K_max + 1):
            sol = evaluate(h, K, problem)
            points.append((sol.round_cost, learning_term(sol, problem), sol))
    points.sort(key=lambda t: (t[0], t[1], t[2].K, tuple(t[2].h)))
    frontier, best_learn = [], math.inf
    for cost, learn, sol in points:
        if learn < best_learn:
            frontier.append(sol)
            best_learn = learn
    return frontier


def learning_term(sol: CoOptSolution, problem: CoOptProblem) -> float:
    l1, l2, _, _ = problem.lambdas
    return sol.p ** -4 + l1 * math.sqrt(1.0 / sol.K) + l2 * (1.0 / (sol.K * sol.p**2)) ** (2.0 / 3.0)
