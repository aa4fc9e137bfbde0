import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdgt.checks import fd_relative_error
from sdgt.problems import (
    FULL,
    OMEGA_KAPPA_80,
    OMEGA_KAPPA_800,
    ProblemError,
    calibrate_omega,
    condition_number,
    generate_cluster_classification,
    generate_least_squares,
    kappa_for_omega,
    load_problem,
    make_problem,
    stochastic_gradient,
)
from sdgt.rng import make_rng


def ar_loop(z, omega):
    a = np.empty_like(z)
    a[0] = z[0] / np.sqrt(1 - omega**2)
    for t in range(1, len(z)):
        a[t] = omega * a[t - 1] + z[t]
    return a


def test_calibrated_kappa():
    assert kappa_for_omega(OMEGA_KAPPA_80) == pytest.approx(80, rel=0.01)
    assert kappa_for_omega(OMEGA_KAPPA_800) == pytest.approx(800, rel=0.01)
    assert condition_number(generate_least_squares(omega=OMEGA_KAPPA_80)) == pytest.approx(80, rel=0.01)


def test_calibration_recovers_frozen_omega():
    assert calibrate_omega(80) == pytest.approx(OMEGA_KAPPA_80, abs=1e-4)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_kappa_stable_across_data_seeds(seed):
    assert kappa_for_omega(OMEGA_KAPPA_80, rng_seed=seed) == pytest.approx(80, rel=0.1)
    assert kappa_for_omega(OMEGA_KAPPA_800, rng_seed=seed) == pytest.approx(800, rel=0.1)


def test_rows_follow_ar_recursion():
    omega = 0.7
    p = generate_least_squares(n=3, d=10, samples_per_client=6, omega=omega, noise_std=0.3, rng_seed=5)
    rng = make_rng(5, "data")
    x0 = rng.standard_normal(10)
    z = rng.standard_normal((3, 6, 10))
    noise = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(p.x0, x0)
    for i in range(3):
        for j in range(6):
            np.testing.assert_allclose(p.A[i, j], ar_loop(z[i, j], omega), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(p.b, np.einsum("nmd,d->nm", p.A, x0) + 0.3 * noise, atol=1e-12)


def test_omega_zero_rows_are_white():
    p = generate_least_squares(n=2, d=6, samples_per_client=5, omega=0.0, rng_seed=1)
    rng = make_rng(1, "data")
    rng.standard_normal(6)
    np.testing.assert_array_equal(p.A, rng.standard_normal((2, 5, 6)))


def test_noiseless_recovers_signal():
    p = generate_least_squares(n=5, d=10, samples_per_client=8, noise_std=0.0, rng_seed=2)
    np.testing.assert_allclose(p.x_star, p.x0, atol=1e-10)
    assert np.linalg.norm(p.grad(p.x0)) < 1e-10
    assert np.abs(p.full_grads_at(p.x0)).max() < 1e-10


def test_optimum_is_stationary():
    p = generate_least_squares(omega=OMEGA_KAPPA_800)
    g0 = np.linalg.norm(p.grad(np.zeros(p.d)))
    assert np.linalg.norm(p.grad(p.x_star)) <= 1e-8 * (1 + g0)
    assert p.f_star == pytest.approx(p.loss(p.x_star))
    assert p.f_star > 0


def test_least_squares_closed_form(small_ls):
    x = make_rng(0, "check").standard_normal(small_ls.d)
    for i in range(small_ls.n):
        A, b = small_ls.A[i], small_ls.b[i]
        expect = A.T @ (A @ x - b) / A.shape[0]
        np.testing.assert_allclose(small_ls.client_grad(i, x), expect, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(stochastic_gradient(small_ls, i, x, FULL), expect, rtol=1e-12, atol=1e-12)
        assert small_ls.client_losses(np.tile(x, (small_ls.n, 1)))[i] == pytest.approx(
            np.sum((A @ x - b) ** 2) / (2 * A.shape[0]))


def test_condition_number_examples():
    assert condition_number(np.eye(3)) == pytest.approx(1.0)
    assert condition_number(np.diag([4.0, 1.0])) == pytest.approx(4.0)
    with pytest.raises(ProblemError):
        condition_number(np.diag([1.0, 0.0]))


def test_least_squares_rejections():
    with pytest.raises(ProblemError):
        generate_least_squares(omega=1.0)
    with pytest.raises(ProblemError, match="singular"):
        generate_least_squares(n=2, d=10, samples_per_client=3)


@pytest.mark.parametrize("which", ["small_ls", "small_cls"])
def test_finite_differences(which, request):
    p = request.getfixturevalue(which)
    rng = make_rng(1, "check")
    for _ in range(10):
        x = rng.standard_normal(p.d)
        assert fd_relative_error(p, x) <= 1e-5
        assert fd_relative_error(p, x, client=int(rng.integers(p.n))) <= 1e-5


def test_vectorized_grads_match_per_client(small_cls):
    X = make_rng(2, "check").standard_normal((small_cls.n, small_cls.d))
    G = small_cls.grads(X)
    for i in range(small_cls.n):
        np.testing.assert_allclose(G[i], small_cls.client_grad(i, X[i]), rtol=1e-13, atol=1e-15)


def test_classification_loss_at_zero():
    p = generate_cluster_classification(n=4, d=3, classes=4, samples_per_client=5, hidden_width=3)
    assert p.loss(np.zeros(p.d)) == pytest.approx(np.log(4))
    g = p.full_grads_at(np.zeros(p.d))
    assert not np.allclose(g[0], g[1])
    # every client sees one class only
    assert all(len(set(row)) == 1 for row in p.labels.tolist())
    assert p.labels[:, 0].tolist() == [0, 1, 2, 3]


def test_classification_single_class_uniform_output():
    # logits are all zero; only the bias of the output layer gets a gradient,
    # and the two clients' gradients differ only through their class
    p = generate_cluster_classification(n=2, d=3, classes=2, samples_per_client=4, hidden_width=3)
    g = p.full_grads_at(np.zeros(p.d))
    b2 = g[:, -2:]
    np.testing.assert_allclose(b2, [[-0.5, 0.5], [0.5, -0.5]], atol=1e-15)
    np.testing.assert_allclose(b2.sum(axis=1), 0, atol=1e-15)


def test_classification_rejections():
    with pytest.raises(ProblemError):
        generate_cluster_classification(classes=1)
    with pytest.raises(ProblemError):
        generate_cluster_classification(n=7, classes=3, strict_sharding=True)
    generate_cluster_classification(n=9, classes=3, strict_sharding=True)


def test_stochastic_full_batch_equals_full(small_ls):
    x = np.ones(small_ls.d)
    np.testing.assert_array_equal(stochastic_gradient(small_ls, 2, x, small_ls.samples_per_client),
                                  stochastic_gradient(small_ls, 2, x, FULL))


def test_stochastic_gradient_unbiased(small_ls):
    x = make_rng(3, "check").standard_normal(small_ls.d)
    draws = np.stack([stochastic_gradient(small_ls, 1, x, 4, rng_seed=s) for s in range(10000)])
    full = small_ls.client_grad(1, x)
    err = np.linalg.norm(draws.mean(axis=0) - full)
    bound = 3 * np.sqrt(draws.var(axis=0).sum() / len(draws))
    assert err <= bound


def test_stochastic_gradient_errors(small_ls):
    x = np.zeros(small_ls.d)
    with pytest.raises(ProblemError):
        stochastic_gradient(small_ls, small_ls.n, x)
    with pytest.raises(ProblemError):
        stochastic_gradient(small_ls, 0, x, small_ls.samples_per_client + 1)
    with pytest.raises(ProblemError):
        stochastic_gradient(small_ls, 0, x, 0)


MINIBATCH_LS = generate_least_squares(n=6, d=12, samples_per_client=20, rng_seed=11)


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 20), seed=st.integers(0, 2**32))
def test_minibatches_without_replacement(batch, seed):
    small_ls = MINIBATCH_LS
    idx = small_ls.draw_batches(batch, make_rng(seed, "batching"))
    if batch == small_ls.samples_per_client:
        assert idx is None
    else:
        assert idx.shape == (small_ls.n, batch)
        assert all(len(set(r)) == batch for r in idx.tolist())


def test_determinism():
    a = generate_cluster_classification(rng_seed=3)
    b = generate_cluster_classification(rng_seed=3)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.initial_point(2), b.initial_point(2))
    c = generate_least_squares(n=4, d=8, samples_per_client=6, rng_seed=3)
    d = generate_least_squares(n=4, d=8, samples_per_client=6, rng_seed=3)
    assert np.array_equal(c.A, d.A) and np.array_equal(c.b, d.b)


@pytest.mark.parametrize("which", ["small_ls", "small_cls"])
def test_snapshot_roundtrip(which, request, tmp_path):
    p = request.getfixturevalue(which)
    p.save(tmp_path / "p.npz")
    q = load_problem(tmp_path / "p.npz")
    x = make_rng(0, "check").standard_normal(p.d)
    assert np.array_equal(p.full_grads_at(x), q.full_grads_at(x))
    assert q.params == p.params


def test_make_problem():
    p = make_problem({"kind": "ls", "kappa": 80, "n": 30})
    assert p.omega == OMEGA_KAPPA_80
    assert make_problem({"kind": "classification", "n": 6, "classes": 3}).n == 6
    with pytest.raises(ProblemError):
        make_problem({"kind": "ls", "kappa": 81})
    with pytest.raises(ProblemError):
        make_problem({"kind": "images"})
