"""Self-checks: invariants, reductions to known methods, oracles, acceptance runs.

Each check returns a :class:`CheckResult`; :func:`check` runs a named suite
and prints one line per check. The acceptance checks are the desk-scale
experiments used by ``tests/test_acceptance.py`` and ``sdgt check acceptance``.
"""

from __future__ import annotations

import hashlib
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .algorithms import RunConfig, Seeds, run
from .cooptimizer import CoOptProblem, brute_force, solve, solve_relaxed
from .diagnostics import log_slope, records_to_csv
from .presets import (
    GAMMA_CLASSIFICATION,
    GAMMA_LS_KAPPA_80,
    GAMMA_LS_KAPPA_800,
    fig5_problem,
)
from .problems import (
    FULL,
    OMEGA_KAPPA_80,
    OMEGA_KAPPA_800,
    generate_cluster_classification,
    generate_least_squares,
)
from .rng import make_rng
from .topology import (
    build_topology,
    generate_geometric_subnet,
    metropolis_hastings_weights,
    mixing_rate,
    verify_mixing_inequality,
)

SUITES = ("invariants", "reductions", "oracles", "acceptance")

# pinned thresholds
CASE1_TOL = 1e-12
CASE2_TOL = 1e-10
CONSERVATION_TOL = 1e-9
STOCHASTIC_TOL = 1e-12
FD_TOL = 1e-5
LINEAR_TARGET = 1e-10
LINEAR_T_MAX = 5000
LINEAR_SLOPE = -1e-4
HETEROGENEITY_RATIO = 1e-2
CLASSIFICATION_TARGET_LOSS = 0.6
COOPT_TARGET = 1e-6
COOPT_COST_RATIO = 0.5
COOPT_K_AT_DELTA_1 = 3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    value: object = None

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.seconds:7.2f}s  {self.detail}"


def _timed(name, fn) -> CheckResult:
    start = time.perf_counter()
    passed, detail, value = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start, value)


def _ls(kappa=80, seed=0, **kw):
    omega = {80: OMEGA_KAPPA_80, 800: OMEGA_KAPPA_800, 0: 0.0}[kappa]
    return generate_least_squares(omega=omega, rng_seed=seed, **kw)


def _rel_err(result, problem):
    return result.column("dist_to_opt_sq") / float(problem.x_star @ problem.x_star)


class ConservationMonitor:
    """Observer tracking how far tracker sums drift from zero.

    In-subnet trackers must sum to zero over each subnet and the server's
    subnet corrections must sum to zero over subnets; violations are
    measured relative to the largest tracker norm seen in that round.
    """

    def __init__(self, topology):
        self.subnets = topology.subnets
        self.worst = 0.0

    def __call__(self, trace):
        z = trace.z
        scale = max(float(np.max(np.linalg.norm(z, axis=1))), 1e-300)
        for idx in self.subnets:
            self.worst = max(self.worst, float(np.linalg.norm(z[idx].sum(axis=0))) / scale)
        if trace.psi is not None:
            scale = max(float(np.max(np.linalg.norm(trace.psi, axis=1))), 1e-300)
            self.worst = max(self.worst, float(np.linalg.norm(trace.psi.sum(axis=0))) / scale)


# ----------------------------------------------------------------------------
# reductions

def case1_max_z(K=5, T=20, seed=0) -> float:
    """Largest in-subnet tracker norm when every client is its own subnet."""
    n = 8
    topology = build_topology(n, n, seed)
    problem = _ls(80, seed, n=n, d=20, samples_per_client=30)
    worst = [0.0]

    def watch(trace):
        worst[0] = max(worst[0], float(np.max(np.linalg.norm(trace.z, axis=1))))

    cfg = RunConfig("SD-GT", K=K, T=T, gamma=0.01, batch_size=5, seeds=Seeds(sampling=seed, batching=seed))
    run(cfg, topology, problem, observer=watch)
    return worst[0]


def reference_gradient_tracking(W, problem, x0, gamma, T):
    """Decentralized gradient tracking followed by exact averaging.

    ``x <- mean(W (x - gamma zhat))`` broadcast to every client, with
    ``zhat <- W zhat + grad F(x_new) - grad F(x_old)`` and ``zhat = grad F(x)``
    at the start. Written from scratch as an oracle for the single-subnet,
    single-D2D-round case. Returns per-round client models and trackers.
    """
    n = W.shape[0]
    x = np.tile(x0, (n, 1))
    grad = np.stack([problem.client_grad(i, x[i]) for i in range(n)])
    zhat = grad.copy()
    xs, zs = [], []
    for _ in range(T):
        mixed = W @ (x - gamma * zhat)
        x_new = np.tile(mixed.mean(axis=0), (n, 1))
        grad_new = np.stack([problem.client_grad(i, x_new[i]) for i in range(n)])
        zhat = W @ zhat + grad_new - grad
        x, grad = x_new, grad_new
        xs.append(x.copy())
        zs.append(zhat - grad)
    return xs, zs


def case2_max_error(T=50, seed=0) -> float:
    n = 6
    topology = build_topology(n, 1, seed)
    problem = _ls(80, seed, n=n, d=20, samples_per_client=30)
    gamma = 0.01
    xs, zs = [], []

    def watch(trace):
        xs.append(trace.x.copy())
        zs.append(trace.z.copy())

    cfg = RunConfig("SD-GT", K=1, T=T, gamma=gamma, diagnostics=False)
    x0 = problem.initial_point()
    run(cfg, topology, problem, x0=x0, observer=watch)
    ref_x, ref_z = reference_gradient_tracking(topology.W[0], problem, x0, gamma, T)
    err = 0.0
    for a, b, c, d in zip(xs, ref_x, zs, ref_z):
        err = max(err, float(np.max(np.linalg.norm(a - b, axis=1))),
                  float(np.max(np.linalg.norm(c - d, axis=1))))
    return err


def check_case1():
    worst = max(case1_max_z(K=K) for K in (1, 3, 5))
    return worst <= CASE1_TOL, f"max ||z|| = {worst:.3g} (<= {CASE1_TOL:g})", worst


def check_case2():
    err = case2_max_error()
    return err <= CASE2_TOL, f"max deviation from reference = {err:.3g} (<= {CASE2_TOL:g})", err


# ----------------------------------------------------------------------------
# invariants

def check_conservation():
    worst = 0.0
    cases = [
        ("SD-GT", _ls(80, 0), build_topology(30, 6, 0), dict(K=5, T=30, gamma=0.01, sample_rate=0.4, batch_size=10)),
        ("SD-GT", _ls(80, 1), build_topology(30, 3, 1, sizes=[5, 10, 15]),
         dict(K=4, T=30, gamma=0.01, sample_rate=0.2)),
        ("SD-GT", generate_cluster_classification(rng_seed=2), build_topology(30, 6, 2),
         dict(K=3, T=30, gamma=0.05, sample_rate=0.4, batch_size=8)),
    ]
    for algo, problem, topology, kw in cases:
        mon = ConservationMonitor(topology)
        run(RunConfig(algo, diagnostics=False, **kw), topology, problem, observer=mon)
        worst = max(worst, mon.worst)
    return worst <= CONSERVATION_TOL, f"worst relative tracker sum = {worst:.3g}", worst


def check_mixing_matrices(count=100, trials=1000, seed=0):
    rng = make_rng(seed, "check", 4)
    worst_sum, worst_sym, failures = 0.0, 0.0, 0
    for i in range(count):
        m = int(rng.integers(3, 11))
        radius = float(rng.uniform(0.5, 3.5))
        A = generate_geometric_subnet(m, radius, int(rng.integers(2**62)))
        W = metropolis_hastings_weights(A)
        worst_sum = max(worst_sum, float(np.max(np.abs(W.sum(axis=0) - 1))),
                        float(np.max(np.abs(W.sum(axis=1) - 1))))
        worst_sym = max(worst_sym, float(np.max(np.abs(W - W.T))))
        if (W < 0).any() or not verify_mixing_inequality(W, mixing_rate(W), trials=trials, rng_seed=i):
            failures += 1
    ok = worst_sum <= STOCHASTIC_TOL and worst_sym == 0.0 and failures == 0
    return ok, f"{count} subnets: sum err {worst_sum:.2g}, asym {worst_sym:.2g}, {failures} failures", failures


def fd_relative_error(problem, x, client=None, eps=1e-6) -> float:
    """Central-difference gradient vs analytic gradient, relative 2-norm error."""
    if client is None:
        f, g = problem.loss, problem.grad(x)
    else:
        f, g = (lambda v: float(problem.client_losses(np.tile(v, (problem.n, 1)))[client])), \
            problem.client_grad(client, x)
    fd = np.empty_like(x)
    for j in range(x.size):
        step = eps * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = step
        fd[j] = (f(x + e) - f(x - e)) / (2 * step)
    return float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-300))


def check_gradients(points=10, seed=0):
    rng = make_rng(seed, "check", 5)
    ls = _ls(80, seed, n=6, d=40, samples_per_client=30)
    cls = generate_cluster_classification(n=6, d=5, classes=3, samples_per_client=10, hidden_width=6,
                                          rng_seed=seed)
    worst = 0.0
    for _ in range(points):
        for problem in (ls, cls):
            x = rng.standard_normal(problem.d)
            client = int(rng.integers(problem.n))
            worst = max(worst, fd_relative_error(problem, x), fd_relative_error(problem, x, client))
    return worst <= FD_TOL, f"worst relative error {worst:.2g} over {points} points", worst


def check_seed_separation():
    base = build_topology(12, 3, 5)
    same = [np.array_equal(a, b) for a, b in zip(base.adjacency, build_topology(12, 3, 5).adjacency)]
    p1 = _ls(0, 3, n=4, d=10, samples_per_client=12)
    p2 = _ls(0, 3, n=4, d=10, samples_per_client=12)
    # a sampling-seed change must leave the batch stream untouched
    a = make_rng(1, "batching").standard_normal(8)
    b = make_rng(1, "batching").standard_normal(8)
    c = make_rng(1, "sampling").standard_normal(8)
    ok = all(same) and np.array_equal(p1.A, p2.A) and np.array_equal(a, b) and not np.array_equal(a, c)
    return ok, "streams are reproducible and distinct", None


# ----------------------------------------------------------------------------
# oracles

def random_coopt_problem(rng) -> CoOptProblem:
    S = int(rng.integers(1, 4))
    m = rng.integers(1, 7, size=S).tolist()
    E = rng.uniform(1, 100, size=S).tolist()
    delta = float(10 ** rng.uniform(-4, 0))
    lambdas = (float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), float(10 ** rng.uniform(-3, 0)),
               float(10 ** rng.uniform(-4, -1)))
    return CoOptProblem(m, E, delta=delta, lambdas=lambdas, K_max=int(rng.integers(1, 51)))


def check_coopt_exact(count=50, seed=0):
    rng = make_rng(seed, "check", 10)
    mismatches = 0
    for _ in range(count):
        problem = random_coopt_problem(rng)
        if solve(problem).objective_value != brute_force(problem).objective_value:
            mismatches += 1
    return mismatches == 0, f"{count} instances, {mismatches} mismatches", mismatches


def check_relaxed_bound(count=30, seed=1):
    rng = make_rng(seed, "check", 11)
    worst = -math.inf
    for _ in range(count):
        problem = random_coopt_problem(rng)
        gap = solve_relaxed(problem).objective_value - solve(problem).objective_value
        worst = max(worst, gap)
    ok = worst <= 1e-9
    return ok, f"max(relaxed - discrete) = {worst:.3g}", worst


# ----------------------------------------------------------------------------
# acceptance experiments

def linear_convergence(gamma=GAMMA_LS_KAPPA_80, T=400, seed=0):
    """Rounds to reach the target relative error and the fitted log slope.

    The slope is fitted over the second half of the rounds up to the first
    one at or below the target, so the machine-precision floor does not
    flatten it. Returns ``(t_hit, slope, errors, csv_text)``.
    """
    problem, topology = _ls(80, seed), build_topology(30, 6, seed)
    cfg = RunConfig("SD-GT", K=40, T=T, gamma=gamma, seeds=Seeds(seed, seed, seed, seed, seed))
    res = run(cfg, topology, problem)
    err = _rel_err(res, problem)
    hit = np.flatnonzero(err <= LINEAR_TARGET)
    t_hit = int(hit[0]) + 1 if hit.size else None
    slope = log_slope(err[: t_hit or len(err)])
    return t_hit, slope, err, records_to_csv(res.records)


def check_linear_convergence():
    t_hit, slope, _, _ = linear_convergence()
    if t_hit is None:
        # the short horizon missed the target; extend to the full budget
        t_hit, slope, _, _ = linear_convergence(T=LINEAR_T_MAX)
    ok = t_hit is not None and t_hit <= LINEAR_T_MAX and slope < LINEAR_SLOPE
    return ok, f"error <= {LINEAR_TARGET:g} at t = {t_hit}, slope = {slope:.4g}", (t_hit, slope)


def heterogeneity(T=1000, seed=0, gamma=GAMMA_LS_KAPPA_80):
    problem, topology = _ls(80, seed), build_topology(30, 6, seed)
    final = {}
    for algo in ("SD-GT", "SD-FedAvg"):
        cfg = RunConfig(algo, K=40, T=T, gamma=gamma, sample_rate=0.4, diagnostics=False,
                        seeds=Seeds(seed, seed, seed, seed, seed))
        final[algo] = float(_rel_err(run(cfg, topology, problem), problem)[-1])
    return final


def check_heterogeneity():
    f = heterogeneity()
    ok = f["SD-GT"] <= HETEROGENEITY_RATIO * f["SD-FedAvg"]
    return ok, f"final error SD-GT {f['SD-GT']:.3g} vs SD-FedAvg {f['SD-FedAvg']:.3g}", f


def rounds_to_loss(K, seed, T=200, target=CLASSIFICATION_TARGET_LOSS, gamma=GAMMA_CLASSIFICATION):
    problem = generate_cluster_classification(rng_seed=seed)
    topology = build_topology(30, 6, seed)
    cfg = RunConfig("SD-GT", K=K, T=T, gamma=gamma, sample_rate=0.4, diagnostics=False,
                    seeds=Seeds(seed, seed, seed, seed, seed))
    loss = run(cfg, topology, problem).column("loss")
    hit = np.flatnonzero(loss <= target)
    return int(hit[0]) + 1 if hit.size else math.inf


def check_d2d_benefit(seeds=range(5)):
    r3 = [rounds_to_loss(3, s) for s in seeds]
    r10 = [rounds_to_loss(10, s) for s in seeds]
    m3, m10 = float(np.median(r3)), float(np.median(r10))
    return m10 < m3, f"median rounds to loss {CLASSIFICATION_TARGET_LOSS}: K=10 {m10:g} vs K=3 {m3:g}", (r3, r10)


def kappa800_slopes(seeds=(0, 1, 2), T=300, gamma=GAMMA_LS_KAPPA_800):
    slopes = {"SD-GT": [], "SCAFFOLD": []}
    for seed in seeds:
        problem, topology = _ls(800, seed), build_topology(30, 6, seed)
        for algo in slopes:
            cfg = RunConfig(algo, K=40, T=T, gamma=gamma, diagnostics=False,
                            seeds=Seeds(seed, seed, seed, seed, seed))
            slopes[algo].append(log_slope(_rel_err(run(cfg, topology, problem), problem)))
    return slopes


def check_scaffold_comparison():
    s = kappa800_slopes()
    gt, sc = float(np.median(s["SD-GT"])), float(np.median(s["SCAFFOLD"]))
    return gt < sc, f"median slope SD-GT {gt:.4g} vs SCAFFOLD {sc:.4g}", s


def check_coopt_brute_force():
    return check_coopt_exact()


def cost_to_target(h, K, delta, E, T, seed=0, gamma=GAMMA_LS_KAPPA_80, target=COOPT_TARGET):
    problem, topology = _ls(80, seed), build_topology(30, 6, seed)
    cfg = RunConfig("SD-GT", K=K, T=T, gamma=gamma, h=h, E=E, delta=delta, diagnostics=False,
                    seeds=Seeds(seed, seed, seed, seed, seed))
    res = run(cfg, topology, problem)
    err = _rel_err(res, problem)
    hit = np.flatnonzero(err <= target)
    return float(res.column("comm_cost_cum")[hit[0]]) if hit.size else math.inf


def check_coopt_behavior():
    small = fig5_problem(1e-3)
    sol = solve(small)
    co = cost_to_target(sol.h, sol.K, 1e-3, small.E, T=300)
    naive = cost_to_target(list(small.m), 1, 1e-3, small.E, T=4000)
    K1 = solve(fig5_problem(1.0)).K
    ok = co <= COOPT_COST_RATIO * naive and K1 <= COOPT_K_AT_DELTA_1
    detail = (f"delta=1e-3: h={sol.h} K={sol.K} cost {co:.4g} vs naive {naive:.4g} "
              f"(ratio {co / naive:.3g}); delta=1: K={K1}")
    return ok, detail, (co, naive, K1)


def check_determinism():
    from .harness import ExperimentSpec, run_experiment

    def once():
        problem = _ls(80, 3)
        topology = build_topology(30, 6, 3)
        cfg = RunConfig("SD-GT", K=5, T=20, gamma=0.01, sample_rate=0.4, batch_size=10,
                        seeds=Seeds(3, 3, 3, 3, 3))
        return records_to_csv(run(cfg, topology, problem).records)

    same_run = once() == once()
    spec = ExperimentSpec.from_dict({
        "name": "determinism",
        "problem": {"kind": "classification", "rng_seed": 1, "samples_per_client": 8},
        "topology": {"n": 12, "S": 3, "seed": 1},
        "algorithms": {a: {"gamma": 0.05, "T": 8, "batch_size": 4} for a in ("SD-GT", "SD-FedAvg", "SCAFFOLD")},
        "sweep": {"K": [2], "sample_rate": [0.5], "seed": [0, 1]},
    })
    hashes = []
    with tempfile.TemporaryDirectory() as tmp:
        for sub in ("a", "b"):
            out = run_experiment(spec, output_dir=Path(tmp) / sub).parent
            hashes.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in out.iterdir()})
    ok = same_run and hashes[0] == hashes[1]
    return ok, f"rerun CSV identical: {same_run}; sweep files identical: {hashes[0] == hashes[1]}", None


ACCEPTANCE = {
    "1 case-1 reduction": check_case1,
    "2 case-2 reduction": check_case2,
    "3 tracker conservation": check_conservation,
    "4 mixing matrices": check_mixing_matrices,
    "5 gradient finite differences": check_gradients,
    "6 linear convergence": check_linear_convergence,
    "7 heterogeneity robustness": check_heterogeneity,
    "8 D2D benefit": check_d2d_benefit,
    "9 SCAFFOLD comparison": check_scaffold_comparison,
    "10 co-optimizer exactness": check_coopt_brute_force,
    "11 co-optimizer behavior": check_coopt_behavior,
    "12 determinism": check_determinism,
}

SUITE_CHECKS = {
    "invariants": {
        "tracker conservation": check_conservation,
        "mixing matrices": lambda: check_mixing_matrices(count=30, trials=200),
        "gradient finite differences": lambda: check_gradients(points=3),
        "seed separation": check_seed_separation,
    },
    "reductions": {
        "case-1 reduction": check_case1,
        "case-2 reduction": check_case2,
    },
    "oracles": {
        "co-optimizer vs brute force": check_coopt_exact,
        "relaxation lower bound": check_relaxed_bound,
    },
    "acceptance": ACCEPTANCE,
}


def run_check(name: str) -> CheckResult:
    for suite in SUITE_CHECKS.values():
        if name in suite:
            return _timed(name, suite[name])
    raise KeyError(f"unknown check {name!r}")


def check(suite: str, out=print) -> list[CheckResult]:
    """Run a suite, print a pass/fail table and return the results."""
    if suite not in SUITE_CHECKS:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    results = []
    for name, fn in SUITE_CHECKS[suite].items():
        res = _timed(name, fn)
        results.append(res)
        if out is not None:
            out(res.line())
    if out is not None:
        passed = sum(r.passed for r in results)
        out(f"{suite}: {passed}/{len(results)} passed")
    return results
