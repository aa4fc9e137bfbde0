"""Step sizes tuned on the synthetic tasks and ready-made experiment presets."""

from __future__ import annotations

from .cooptimizer import CoOptProblem
from .rng import make_rng

# Best median log-error slope on a step-size grid, K = 40, full sampling
# (least squares, n = 30, S = 6). At kappa ~ 800 SD-GT diverges from 0.016 up.
GAMMA_LS_KAPPA_80 = 0.012
GAMMA_LS_KAPPA_800 = 0.006
GAMMA_CLASSIFICATION = 0.05

FIG5_LAMBDAS = (1.0, 1.0, 0.1, 0.01)
FIG5_DELTAS = (1.0, 1e-3)


def server_costs(S: int = 6, seed: int = 0) -> list[float]:
    """Per-subnet device-server costs drawn uniformly from [1, 100]."""
    return make_rng(seed, "data", 7).uniform(1.0, 100.0, size=S).tolist()


def fig5_problem(delta: float, m=(5,) * 6, seed: int = 0, K_max: int = 50) -> CoOptProblem:
    return CoOptProblem(list(m), server_costs(len(m), seed), delta=delta,
                        lambdas=FIG5_LAMBDAS, K_max=K_max)


PRESETS = {
    "fig3-like": {
        "name": "fig3-like",
        "problem": {"kind": "classification", "rng_seed": 0},
        "topology": {"n": 30, "S": 6, "radius_range": [0.5, 3.5], "seed": 0},
        "algorithms": {
            "SD-GT": {"gamma": GAMMA_CLASSIFICATION, "T": 200},
            "SD-FedAvg": {"gamma": GAMMA_CLASSIFICATION, "T": 200},
            "SCAFFOLD": {"gamma": GAMMA_CLASSIFICATION, "T": 200},
        },
        "sweep": {"K": [3, 10], "sample_rate": [0.4], "seed": [0]},
        "output_dir": "results",
        "diagnostics": True,
    },
    "fig4-like": {
        "name": "fig4-like",
        "problem": {"kind": "least_squares", "kappa": 80, "rng_seed": 0},
        "topology": {"n": 30, "S": 6, "radius_range": [0.5, 3.5], "seed": 0},
        "algorithms": {
            "SD-GT": {"gamma": GAMMA_LS_KAPPA_80, "T": 300},
            "SD-FedAvg": {"gamma": GAMMA_LS_KAPPA_80, "T": 300},
            "SCAFFOLD": {"gamma": GAMMA_LS_KAPPA_80, "T": 300},
        },
        "sweep": {"K": [40], "sample_rate": [0.2, 0.4, 1.0], "seed": [0]},
        "output_dir": "results",
        "diagnostics": True,
    },
}


def fig5_specs(seed: int = 0) -> dict[str, dict]:
    """Co-optimized vs naive (full sampling, K = 1) SD-GT, one spec per delta.

    Each spec runs the configuration picked by :func:`sdgt.cooptimizer.solve`
    and the naive one on the least-squares task; plot ``comm_cost_cum`` on
    the x-axis to compare them at equal communication.
    """
    from .cooptimizer import solve

    out = {}
    for delta in FIG5_DELTAS:
        problem = fig5_problem(delta, seed=seed)
        sol = solve(problem)
        common = {"gamma": GAMMA_LS_KAPPA_80, "E": problem.E, "delta": delta, "diagnostics": False}
        name = f"fig5-like-delta{delta:g}"
        out[name] = {
            "solution": sol,
            "coopt": {**common, "algorithm": "SD-GT", "K": sol.K, "h": sol.h, "T": 300},
            "naive": {**common, "algorithm": "SD-GT", "K": 1, "h": list(problem.m), "T": 3000},
        }
    return out
