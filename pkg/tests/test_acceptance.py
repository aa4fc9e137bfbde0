"""Acceptance criteria at their pinned tolerances, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in the terminal
summary (see ``conftest.py``).
"""

import pytest

from sdgt import checks

RESULTS = []


def record(name, passed, detail, capsys):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {name}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    return passed


def run(name, capsys):
    res = checks.run_check(name)
    record(name, res.passed, res.detail, capsys)
    return res


def test_01_case1_reduction(capsys):
    res = run("1 case-1 reduction", capsys)
    assert res.value <= checks.CASE1_TOL


def test_02_case2_reduction(capsys):
    res = run("2 case-2 reduction", capsys)
    assert res.value <= checks.CASE2_TOL


def test_03_tracker_conservation(capsys):
    res = run("3 tracker conservation", capsys)
    assert res.value <= checks.CONSERVATION_TOL


def test_04_mixing_matrices(capsys):
    res = run("4 mixing matrices", capsys)
    assert res.passed and res.value == 0


def test_05_gradient_finite_differences(capsys):
    res = run("5 gradient finite differences", capsys)
    assert res.value <= checks.FD_TOL


def test_06_linear_convergence(capsys):
    res = run("6 linear convergence", capsys)
    t_hit, slope = res.value
    assert t_hit is not None and t_hit <= checks.LINEAR_T_MAX
    assert slope < checks.LINEAR_SLOPE


def test_07_heterogeneity_robustness(capsys):
    res = run("7 heterogeneity robustness", capsys)
    assert res.value["SD-GT"] <= checks.HETEROGENEITY_RATIO * res.value["SD-FedAvg"]


def test_08_d2d_benefit(capsys):
    assert run("8 D2D benefit", capsys).passed


def test_09_scaffold_comparison(capsys):
    assert run("9 SCAFFOLD comparison", capsys).passed


def test_10_coopt_exactness(capsys):
    assert run("10 co-optimizer exactness", capsys).passed


def test_11_coopt_behavior(capsys):
    res = run("11 co-optimizer behavior", capsys)
    co, naive, K1 = res.value
    assert co <= checks.COOPT_COST_RATIO * naive
    assert K1 <= checks.COOPT_K_AT_DELTA_1


def test_12_determinism(capsys):
    res = run("12 determinism", capsys)
    assert res.passed
    # an acceptance-scale run is byte-identical on rerun too
    first = checks.linear_convergence(T=120)[3]
    second = checks.linear_convergence(T=120)[3]
    assert record("12 determinism (acceptance rerun)", first == second,
                  f"linear-convergence CSV identical: {first == second}", capsys)
