"""Per-client loss oracles: correlated least squares and a cluster classification MLP.

Both problem classes store client data stacked along a leading client axis so
that the trainers can evaluate every client's gradient in one vectorized call:
``grads(X)`` takes an ``(n, d)`` matrix whose row ``i`` is client ``i``'s model
and returns the matching ``(n, d)`` gradient matrix.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.signal import lfilter
from scipy.special import expit, log_softmax, softmax

from .rng import make_rng

FULL = "full"

# Correlation parameters calibrated against the aggregate Gram matrix of the
# default instance (n=30, d=200, 30 samples per client, data seed 0); see
# calibrate_omega and tests/test_problems.py::test_calibrated_kappa.
OMEGA_KAPPA_80 = 0.6811
OMEGA_KAPPA_800 = 0.8957


class ProblemError(ValueError):
    pass


def _freeze(*arrays):
    for a in arrays:
        if a is not None:
            a.setflags(write=False)


class _Problem:
    """Shared minibatch machinery; subclasses define ``_grads_on`` and ``_losses_on``."""

    n: int
    d: int
    samples_per_client: int
    x_star: np.ndarray | None = None
    f_star: float | None = None

    def _all_samples(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.samples_per_client), (self.n, self.samples_per_client))

    def draw_batches(self, batch_size, rng: np.random.Generator | None) -> np.ndarray | None:
        """Sample per-client minibatch indices without replacement; ``None`` means full."""
        if batch_size == FULL or batch_size is None:
            return None
        batch_size = int(batch_size)
        if not 1 <= batch_size <= self.samples_per_client:
            raise ProblemError(
                f"batch_size must be in 1..{self.samples_per_client} or FULL, got {batch_size}"
            )
        if batch_size == self.samples_per_client:
            return None
        if rng is None:
            raise ProblemError("a generator is required for minibatch gradients")
        perm = rng.permuted(np.tile(np.arange(self.samples_per_client), (self.n, 1)), axis=1)
        return perm[:, :batch_size]

    def grads(self, X: np.ndarray, batch_size=FULL, rng=None) -> np.ndarray:
        """Row ``i`` is client ``i``'s (minibatch) gradient at ``X[i]``."""
        idx = self.draw_batches(batch_size, rng)
        return self._grads_on(np.asarray(X, dtype=float), idx)

    def client_losses(self, X: np.ndarray) -> np.ndarray:
        return self._losses_on(np.asarray(X, dtype=float))

    def client_grad(self, i: int, x: np.ndarray, samples: np.ndarray | None = None) -> np.ndarray:
        if not 0 <= i < self.n:
            raise ProblemError(f"client index {i} outside 0..{self.n - 1}")
        X = np.broadcast_to(x, (self.n, self.d))
        idx = None if samples is None else np.broadcast_to(samples, (self.n, len(samples)))
        return self._grads_on(X, idx)[i]

    def loss(self, x: np.ndarray) -> float:
        """Global objective ``f(x) = (1/n) sum_i f_i(x)``."""
        return float(self.client_losses(np.broadcast_to(x, (self.n, self.d))).mean())

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.grads(np.broadcast_to(x, (self.n, self.d))).mean(axis=0)

    def full_grads_at(self, x: np.ndarray) -> np.ndarray:
        """Every client's exact gradient at the common point ``x``, shape ``(n, d)``."""
        return self.grads(np.broadcast_to(x, (self.n, self.d)))


def stochastic_gradient(problem: _Problem, client: int, x, batch_size=FULL, rng_seed: int = 0):
    """Gradient of ``f_client`` at ``x`` on a uniformly sampled minibatch.

    ``FULL`` (or a batch equal to the local dataset) returns the exact gradient.
    """
    if not 0 <= client < problem.n:
        raise ProblemError(f"client index {client} outside 0..{problem.n - 1}")
    x = np.asarray(x, dtype=float)
    if batch_size == FULL or int(batch_size) == problem.samples_per_client:
        if batch_size != FULL and not 1 <= int(batch_size) <= problem.samples_per_client:
            raise ProblemError(f"invalid batch_size {batch_size}")
        return problem.client_grad(client, x)
    batch_size = int(batch_size)
    if not 1 <= batch_size <= problem.samples_per_client:
        raise ProblemError(
            f"batch_size must be in 1..{problem.samples_per_client} or FULL, got {batch_size}"
        )
    rng = make_rng(rng_seed, "batching", client)
    samples = rng.choice(problem.samples_per_client, size=batch_size, replace=False)
    return problem.client_grad(client, x, samples)


# ----------------------------------------------------------------------------
# least squares


def _ar_rows(z: np.ndarray, omega: float) -> np.ndarray:
    # a_1 = z_1 / sqrt(1 - omega^2), a_{t+1} = omega a_t + z_{t+1}, along the last axis
    z = z.copy()
    z[..., 0] /= np.sqrt(1.0 - omega**2)
    return lfilter([1.0], [1.0, -omega], z, axis=-1)


class LeastSquaresProblem(_Problem):
    """``f_i(x) = ||A_i x - b_i||^2 / (2 |D_i|)`` with a known global minimizer."""

    kind = "least_squares"

    def __init__(self, A, b, omega=0.0, noise_std=0.0, x0=None, params=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.A.ndim != 3 or self.b.shape != self.A.shape[:2]:
            raise ProblemError(f"A must be (n, m, d) and b (n, m); got {self.A.shape}, {self.b.shape}")
        self.n, self.samples_per_client, self.d = self.A.shape
        self.omega = float(omega)
        self.noise_std = float(noise_std)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self.params = dict(params or {})
        self.gram = np.einsum("nmd,nme->de", self.A, self.A) / (self.n * self.samples_per_client)
        rhs = np.einsum("nmd,nm->d", self.A, self.b) / (self.n * self.samples_per_client)
        eig = np.linalg.eigvalsh(self.gram)
        if eig[0] <= 1e-12 * max(eig[-1], 1.0):
            raise ProblemError(
                f"aggregate Gram matrix is singular (condition estimate {eig[-1] / max(eig[0], 1e-300):.3g})"
            )
        self.eigenvalues = eig
        self._At = np.ascontiguousarray(np.swapaxes(self.A, 1, 2))
        self.x_star = np.linalg.solve(self.gram, rhs)
        self.f_star = self.loss(self.x_star)
        _freeze(self.A, self.b, self.x0, self.gram, self.x_star, self.eigenvalues, self._At)

    def _residuals(self, X, idx):
        if idx is None:
            A, b = self.A, self.b
        else:
            A = np.take_along_axis(self.A, idx[:, :, None], axis=1)
            b = np.take_along_axis(self.b, idx, axis=1)
        return A, b, (A @ X[:, :, None])[:, :, 0] - b

    def _grads_on(self, X, idx):
        A, _, r = self._residuals(X, idx)
        At = self._At if idx is None else np.swapaxes(A, 1, 2)
        return (At @ r[:, :, None])[:, :, 0] / A.shape[1]

    def _losses_on(self, X):
        _, _, r = self._residuals(X, None)
        return 0.5 * np.mean(r**2, axis=1)

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        return np.zeros(self.d)

    def smoothness(self) -> float:
        """Largest per-client smoothness constant ``max_i lambda_max(A_i^T A_i) / |D_i|``."""
        return float(max(np.linalg.norm(a, 2) ** 2 for a in self.A) / self.samples_per_client)

    def save(self, path) -> None:
        np.savez(
            path, A=self.A, b=self.b, x0=self.x0 if self.x0 is not None else np.zeros(0),
            meta=json.dumps({"kind": self.kind, "omega": self.omega,
                             "noise_std": self.noise_std, "params": self.params}),
        )


def generate_least_squares(
    n: int = 30,
    d: int = 200,
    samples_per_client: int = 30,
    omega: float = 0.0,
    noise_std: float = 0.2,
    rng_seed: int = 0,
) -> LeastSquaresProblem:
    """Correlated-design least squares: ``b_i = A_i x0 + noise``.

    Each sensing row is an AR(1) sequence with correlation ``omega`` started
    from its stationary distribution, so larger ``omega`` gives a worse
    conditioned aggregate Gram matrix.
    """
    if not 0.0 <= omega < 1.0:
        raise ProblemError(f"omega must be in [0, 1), got {omega}")
    if d < 1 or samples_per_client < 1 or n < 1:
        raise ProblemError("n, d and samples_per_client must be positive")
    if noise_std < 0:
        raise ProblemError(f"noise_std must be non-negative, got {noise_std}")
    rng = make_rng(rng_seed, "data")
    x0 = rng.standard_normal(d)
    A = _ar_rows(rng.standard_normal((n, samples_per_client, d)), omega)
    noise = rng.standard_normal((n, samples_per_client))
    b = np.einsum("nmd,d->nm", A, x0) + noise_std * noise
    params = dict(n=n, d=d, samples_per_client=samples_per_client, omega=omega,
                  noise_std=noise_std, rng_seed=rng_seed)
    return LeastSquaresProblem(A, b, omega, noise_std, x0, params)


def condition_number(problem) -> float:
    """``lambda_max / lambda_min`` of the aggregate Gram ``(1/n) sum_i A_i^T A_i / |D_i|``."""
    if isinstance(problem, LeastSquaresProblem):
        eig = problem.eigenvalues
    else:
        gram = np.asarray(problem, dtype=float)
        eig = np.linalg.eigvalsh(gram)
    if eig[0] <= 1e-12 * max(abs(eig[-1]), 1.0):
        raise ProblemError("Gram matrix is not positive definite")
    return float(eig[-1] / eig[0])


def kappa_for_omega(omega, n=30, d=200, samples_per_client=30, rng_seed=0) -> float:
    rng = make_rng(rng_seed, "data")
    rng.standard_normal(d)
    A = _ar_rows(rng.standard_normal((n, samples_per_client, d)), omega)
    gram = np.einsum("nmd,nme->de", A, A) / (n * samples_per_client)
    return condition_number(gram)


def calibrate_omega(target_kappa, n=30, d=200, samples_per_client=30, rng_seed=0, xtol=1e-10) -> float:
    """Find ``omega`` such that the generated instance has condition number ``target_kappa``."""
    def gap(omega):
        return np.log(kappa_for_omega(omega, n, d, samples_per_client, rng_seed)) - np.log(target_kappa)

    if gap(0.0) >= 0:
        raise ProblemError(f"kappa at omega=0 already exceeds {target_kappa}")
    return float(brentq(gap, 0.0, 0.999, xtol=xtol))


# ----------------------------------------------------------------------------
# cluster classification


def _softplus(z):
    return np.logaddexp(0.0, z)


class ClusterClassificationProblem(_Problem):
    """Softmax cross-entropy of a two-layer softplus network on Gaussian clusters.

    Parameters are flattened as ``[W1 (h x p), b1 (h), W2 (c x h), b2 (c)]``.
    Client ``i`` only holds samples of class ``labels_of_client[i]``.
    """

    kind = "cluster_classification"

    def __init__(self, inputs, labels, classes, hidden_width, centers=None, params=None):
        self.inputs = np.asarray(inputs, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.n, self.samples_per_client, self.input_dim = self.inputs.shape
        self.classes = int(classes)
        self.hidden_width = int(hidden_width)
        self.centers = None if centers is None else np.asarray(centers, dtype=float)
        self.params = dict(params or {})
        h, p, c = self.hidden_width, self.input_dim, self.classes
        self._shapes = [(h, p), (h,), (c, h), (c,)]
        self.d = h * p + h + c * h + c
        self._onehot = np.eye(c)[self.labels]
        _freeze(self.inputs, self.labels, self.centers, self._onehot)

    def unpack(self, X):
        """Split stacked parameter rows ``(n, d)`` into per-layer arrays."""
        out, start = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(X[:, start:start + size].reshape((X.shape[0], *shape)))
            start += size
        return out

    def _forward(self, X, idx):
        W1, b1, W2, b2 = self.unpack(X)
        if idx is None:
            inputs, onehot = self.inputs, self._onehot
        else:
            inputs = np.take_along_axis(self.inputs, idx[:, :, None], axis=1)
            onehot = np.take_along_axis(self._onehot, idx[:, :, None], axis=1)
        pre = np.einsum("nbp,nhp->nbh", inputs, W1) + b1[:, None, :]
        hidden = _softplus(pre)
        logits = np.einsum("nbh,nch->nbc", hidden, W2) + b2[:, None, :]
        return inputs, onehot, pre, hidden, logits, W2

    def _losses_on(self, X):
        _, onehot, _, _, logits, _ = self._forward(X, None)
        return -np.mean(np.sum(onehot * log_softmax(logits, axis=-1), axis=-1), axis=1)

    def _grads_on(self, X, idx):
        inputs, onehot, pre, hidden, logits, W2 = self._forward(X, idx)
        batch = inputs.shape[1]
        dlogits = (softmax(logits, axis=-1) - onehot) / batch
        gW2 = np.einsum("nbc,nbh->nch", dlogits, hidden)
        gb2 = dlogits.sum(axis=1)
        dpre = np.einsum("nbc,nch->nbh", dlogits, W2) * expit(pre)
        gW1 = np.einsum("nbh,nbp->nhp", dpre, inputs)
        gb1 = dpre.sum(axis=1)
        n = X.shape[0]
        return np.concatenate(
            [gW1.reshape(n, -1), gb1, gW2.reshape(n, -1), gb2], axis=1
        )

    def accuracy(self, x) -> float:
        X = np.broadcast_to(x, (self.n, self.d))
        _, onehot, _, _, logits, _ = self._forward(X, None)
        return float(np.mean(logits.argmax(-1) == onehot.argmax(-1)))

    def initial_point(self, seed: int = 0) -> np.ndarray:
        rng = make_rng(seed, "init")
        h, p, c = self.hidden_width, self.input_dim, self.classes
        return np.concatenate([
            rng.standard_normal(h * p) / np.sqrt(p),
            np.zeros(h),
            rng.standard_normal(c * h) / np.sqrt(h),
            np.zeros(c),
        ])

    def save(self, path) -> None:
        np.savez(
            path, inputs=self.inputs, labels=self.labels,
            centers=self.centers if self.centers is not None else np.zeros(0),
            meta=json.dumps({"kind": self.kind, "classes": self.classes,
                             "hidden_width": self.hidden_width, "params": self.params}),
        )


def generate_cluster_classification(
    n: int = 30,
    d: int = 10,
    classes: int = 10,
    samples_per_client: int = 20,
    hidden_width: int = 16,
    rng_seed: int = 0,
    center_scale: float = 1.0,
    spread: float = 1.0,
    strict_sharding: bool = False,
) -> ClusterClassificationProblem:
    """Gaussian-cluster classification with one class per client.

    Client ``i`` holds only class ``i mod classes``. ``strict_sharding``
    additionally requires every class to be held by the same number of clients.
    """
    if classes < 2:
        raise ProblemError(f"need at least 2 classes, got {classes}")
    if min(n, d, samples_per_client, hidden_width) < 1:
        raise ProblemError("n, d, samples_per_client and hidden_width must be positive")
    if strict_sharding and n % classes:
        raise ProblemError(f"strict sharding needs n divisible by classes ({n} % {classes} != 0)")
    rng = make_rng(rng_seed, "data")
    centers = center_scale * rng.standard_normal((classes, d))
    client_class = np.arange(n) % classes
    labels = np.repeat(client_class[:, None], samples_per_client, axis=1)
    inputs = centers[labels] + spread * rng.standard_normal((n, samples_per_client, d))
    params = dict(n=n, d=d, classes=classes, samples_per_client=samples_per_client,
                  hidden_width=hidden_width, rng_seed=rng_seed,
                  center_scale=center_scale, spread=spread)
    return ClusterClassificationProblem(inputs, labels, classes, hidden_width, centers, params)


def load_problem(path):
    """Rebuild a problem from a snapshot written by ``save``."""
    with np.load(Path(path), allow_pickle=False) as snap:
        meta = json.loads(str(snap["meta"]))
        if meta["kind"] == LeastSquaresProblem.kind:
            x0 = snap["x0"] if snap["x0"].size else None
            return LeastSquaresProblem(snap["A"], snap["b"], meta["omega"],
                                       meta["noise_std"], x0, meta["params"])
        centers = snap["centers"] if snap["centers"].size else None
        return ClusterClassificationProblem(snap["inputs"], snap["labels"], meta["classes"],
                                            meta["hidden_width"], centers, meta["params"])


def make_problem(spec: dict):
    """Build a problem from a ``{"kind": ..., **parameters}`` mapping."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind in ("least_squares", "ls"):
        kappa = spec.pop("kappa", None)
        if kappa is not None:
            calibrated = {80: OMEGA_KAPPA_80, 800: OMEGA_KAPPA_800}
            if kappa not in calibrated:
                raise ProblemError(f"no calibrated omega for kappa={kappa}; use 80, 800 or give omega")
            spec["omega"] = calibrated[kappa]
        return generate_least_squares(**spec)
    if kind in ("cluster_classification", "classification"):
        return generate_cluster_classification(**spec)
    raise ProblemError(f"unknown problem kind {kind!r}")
