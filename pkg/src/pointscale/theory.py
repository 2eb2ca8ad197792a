"""Numeric verification oracles for the asymptotic contribution results.

Two settings are covered:

* Linear regression with Gaussian design, where the conditional expected
  contribution has a closed form: the leading term is
  (2 sigma^2 - eps^2) x' Sigma^-1 x / k^2, predicting decay exponent 2.
* General M-estimators evaluated with a held-out empirical metric, where the
  first-order term is (1/k) grad_metric' V^-1 grad_loss(z), predicting decay
  exponent 1; logistic loss supplies the worked derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .data import Dataset
from .models import _sigmoid


class TheoryError(ValueError):
    """Raised for invalid verification instances."""


# ----------------------------------------------------------------------
# linear regression, fixed design
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LinearTheoryInstance:
    """Fixed-design linear setup: known beta*, Sigma, noise level, a drawn
    design matrix X_D, and the evaluated point (x, y)."""

    beta_star: np.ndarray
    Sigma: np.ndarray
    sigma2_noise: float
    X_D: np.ndarray
    x: np.ndarray
    y: float

    def __post_init__(self):
        d = len(self.beta_star)
        if self.Sigma.shape != (d, d):
            raise TheoryError("Sigma shape mismatch")
        try:
            np.linalg.cholesky(self.Sigma)
        except np.linalg.LinAlgError:
            raise TheoryError("Sigma must be SPD") from None
        if self.sigma2_noise <= 0:
            raise TheoryError("sigma2_noise must be positive")
        if self.X_D.ndim != 2 or self.X_D.shape[1] != d:
            raise TheoryError("X_D shape mismatch")
        if self.X_D.shape[0] < d + 5:
            raise TheoryError("need k >= d + 5 rows in X_D")
        for arr in (self.beta_star, self.Sigma, self.X_D, self.x):
            if not np.isfinite(arr).all():
                raise TheoryError("non-finite instance entries")

    @property
    def k(self) -> int:
        return self.X_D.shape[0]

    @property
    def epsilon(self) -> float:
        return float(self.y - self.x @ self.beta_star)


def draw_linear_instance(
    beta_star,
    Sigma,
    sigma2_noise: float,
    k: int,
    seed: int,
    x=None,
    epsilon: float | None = None,
) -> LinearTheoryInstance:
    """Draw X_D (and optionally x) from N(0, Sigma); epsilon defaults to a
    N(0, sigma^2) draw."""
    beta_star = np.asarray(beta_star, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    chol = np.linalg.cholesky(Sigma)
    gen = seeding.rng(seed)
    X_D = gen.standard_normal((k, len(beta_star))) @ chol.T
    if x is None:
        x = gen.standard_normal(len(beta_star)) @ chol.T
    x = np.asarray(x, dtype=np.float64)
    if epsilon is None:
        epsilon = float(np.sqrt(sigma2_noise) * gen.standard_normal())
    y = float(x @ beta_star + epsilon)
    return LinearTheoryInstance(beta_star, Sigma, float(sigma2_noise), X_D, x, y)


def linear_leading_term(instance: LinearTheoryInstance, k: int) -> float:
    """Leading term of the conditional expected contribution:

        (2 sigma^2 - eps^2) * x' Sigma^-1 x / k^2

    Positive when the point's squared noise is below twice the population
    noise level; the quadratic form is the point's asymptotic leverage.
    """
    lev = float(instance.x @ np.linalg.solve(instance.Sigma, instance.x))
    eps2 = instance.epsilon**2
    return (2.0 * instance.sigma2_noise - eps2) * lev / float(k) ** 2


def linear_exact_expected_delta(instance: LinearTheoryInstance) -> float:
    """Exact conditional expectation over the label noise of the design:

        sigma^2 tr((X'X)^-1 Sigma - (X'X + xx')^-1 Sigma)
            - (eps^2 - sigma^2) x' (X'X + xx')^-1 Sigma (X'X + xx')^-1 x

    Valid at any finite k with a full-rank design.
    """
    X, x = instance.X_D, instance.x
    sigma2 = instance.sigma2_noise
    eps2 = instance.epsilon**2
    G = X.T @ X
    Gz = G + np.outer(x, x)
    Ginv_S = np.linalg.solve(G, instance.Sigma)
    Gzinv_S = np.linalg.solve(Gz, instance.Sigma)
    Gzinv_x = np.linalg.solve(Gz, x)
    quad = float(Gzinv_x @ instance.Sigma @ Gzinv_x)
    return sigma2 * float(np.trace(Ginv_S) - np.trace(Gzinv_S)) - (eps2 - sigma2) * quad


def linear_delta_oracle(
    instance: LinearTheoryInstance, k: int, n_noise_draws: int, seed: int
):
    """Monte Carlo over label-noise vectors: draw eps_D, refit OLS with and
    without (x, y), and evaluate the contribution through the closed-form
    population MSE. Returns (mean, stderr)."""
    if instance.k != k:
        raise TheoryError(f"instance has {instance.k} design rows, expected {k}")
    X, x = instance.X_D, instance.x
    Sigma = instance.Sigma
    sigma = float(np.sqrt(instance.sigma2_noise))
    G = X.T @ X
    if np.linalg.matrix_rank(G) < X.shape[1]:
        raise TheoryError("rank-deficient design")
    Gz = G + np.outer(x, x)
    # beta_hat - beta* is linear in the noise: A eps for D, B eps + b0 with z
    A = np.linalg.solve(G, X.T)
    B = np.linalg.solve(Gz, X.T)
    b0 = np.linalg.solve(Gz, x) * instance.epsilon

    gen = seeding.rng(seed)
    deltas = np.empty(n_noise_draws)
    chunk = max(1, min(n_noise_draws, int(2e7) // max(1, k)))
    done = 0
    while done < n_noise_draws:
        size = min(chunk, n_noise_draws - done)
        E = sigma * gen.standard_normal((size, k))
        U = E @ A.T
        V = E @ B.T + b0
        q_without = np.einsum("ij,ij->i", U @ Sigma, U)
        q_with = np.einsum("ij,ij->i", V @ Sigma, V)
        deltas[done : done + size] = q_without - q_with
        done += size
    mean = float(np.mean(deltas))
    stderr = float(np.std(deltas, ddof=1) / np.sqrt(n_noise_draws))
    return mean, stderr


# ----------------------------------------------------------------------
# M-estimators with a held-out metric (logistic loss worked case)
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class MEstimatorInstance:
    """Population surrogate for an M-estimation problem: the reference-sample
    minimizer theta*, the Hessian V at theta*, and the gradient of the fixed
    held-out metric at theta*."""

    theta_star: np.ndarray
    V: np.ndarray
    metric_grad: np.ndarray

    def __post_init__(self):
        d = len(self.theta_star)
        if self.V.shape != (d, d) or self.metric_grad.shape != (d,):
            raise TheoryError("shape mismatch in M-estimator instance")
        try:
            np.linalg.cholesky(self.V)
        except np.linalg.LinAlgError:
            raise TheoryError("V must be SPD") from None
        for arr in (self.theta_star, self.V, self.metric_grad):
            if not np.isfinite(arr).all():
                raise TheoryError("non-finite instance entries")


def logistic_loss_gradient(theta: np.ndarray, x: np.ndarray, y: float) -> np.ndarray:
    """Per-example logistic loss gradient -x (y - sigmoid(theta.x))."""
    p = _sigmoid(np.asarray([theta @ x]))[0]
    return -x * (y - p)


def build_logistic_instance(
    pool_sampler,
    d: int,
    reference_n: int = 200000,
    validation_n: int = 1000,
    seed: int = 0,
    newton_tol: float = 1e-10,
):
    """Construct an M-estimator instance for bias-free logistic regression.

    ``pool_sampler(rng, n)`` must return (X, y) drawn i.i.d. from the data
    distribution. theta* is computed by Newton's method on a reference sample
    of ``reference_n`` points (a population surrogate); the held-out metric is
    the mean logistic loss on a fresh validation sample of ``validation_n``
    points, so its gradient at theta* is generically nonzero.
    """
    gen = seeding.rng(seeding.mix(seed, seeding.NOISE, 0))
    X_ref, y_ref = pool_sampler(gen, reference_n)
    theta = np.zeros(d)
    for _ in range(100):
        p = _sigmoid(X_ref @ theta)
        g = X_ref.T @ (p - y_ref) / reference_n
        if np.max(np.abs(g)) <= newton_tol:
            break
        w = p * (1.0 - p)
        H = (X_ref * w[:, None]).T @ X_ref / reference_n
        theta = theta - np.linalg.solve(H, g)
    p = _sigmoid(X_ref @ theta)
    w = p * (1.0 - p)
    V = (X_ref * w[:, None]).T @ X_ref / reference_n

    gen_val = seeding.rng(seeding.mix(seed, seeding.NOISE, 1))
    X_val, y_val = pool_sampler(gen_val, validation_n)
    p_val = _sigmoid(X_val @ theta)
    metric_grad = X_val.T @ (p_val - y_val) / validation_n
    instance = MEstimatorInstance(theta, V, metric_grad)
    return instance, (X_val, y_val)


def mestimator_leading_term(instance: MEstimatorInstance, z, k: int) -> float:
    """First-order contribution for a held-out metric with nonzero gradient:

        (1/k) * metric_grad' V^-1 grad_loss(theta*; x, y)
    """
    if not np.any(instance.metric_grad):
        raise TheoryError("metric gradient is zero; first-order term vanishes")
    x = np.asarray(z.x, dtype=np.float64)
    g = logistic_loss_gradient(instance.theta_star, x, float(z.y))
    return float(instance.metric_grad @ np.linalg.solve(instance.V, g)) / k


# ----------------------------------------------------------------------
# campaign-level exponent check
# ----------------------------------------------------------------------


# ----------------------------------------------------------------------
# end-to-end verification drivers
# ----------------------------------------------------------------------


def verify_linear_theory(
    d: int = 2,
    k: int = 200,
    sigma2: float = 1.0,
    epsilon: float = 0.0,
    n_draws: int = 50000,
    seed: int = 0,
    leading_rtol: float = 0.2,
) -> dict:
    """Check the fixed-design linear result on one drawn instance.

    The Monte Carlo mean over label noise must agree with the exact
    conditional expectation within 3 standard errors, and with the leading
    1/k^2 term within ``leading_rtol`` relative error.
    """
    instance = draw_linear_instance(
        beta_star=np.ones(d), Sigma=np.eye(d), sigma2_noise=sigma2,
        k=k, seed=seed, epsilon=epsilon,
    )
    exact = linear_exact_expected_delta(instance)
    leading = linear_leading_term(instance, k)
    mc_mean, stderr = linear_delta_oracle(
        instance, k, n_draws, seed=seeding.mix(seed, seeding.NOISE, 2)
    )
    exact_ok = abs(mc_mean - exact) <= 3.0 * stderr
    leading_ok = abs(mc_mean - leading) <= leading_rtol * abs(leading)
    return {
        "d": d, "k": k, "sigma2": sigma2, "epsilon": epsilon, "n_draws": n_draws,
        "mc_mean": mc_mean, "mc_stderr": stderr, "exact": exact, "leading": leading,
        "exact_within_3_stderr": bool(exact_ok),
        "leading_rtol": leading_rtol,
        "leading_within_rtol": bool(leading_ok),
        "passed": bool(exact_ok and leading_ok),
    }


def verify_mestimator_theory(
    d: int = 2,
    separation: float = 1.0,
    k: int = 500,
    n_samples: int = 20000,
    points: int = 2,
    pool_n: int = 20000,
    validation_n: int = 1000,
    reference_n: int = 200000,
    seed: int = 0,
    rel_slack: float = 0.3,
    workers: int = 1,
) -> dict:
    """Check the first-order M-estimator term for bias-free, unregularized
    logistic regression with a held-out cross-entropy metric.

    For each checked point the sampled mean contribution at size k must be
    within 3 standard errors plus ``rel_slack`` relative slack of the
    predicted (1/k) term; the slack absorbs the higher-order remainder.
    """
    from . import data as data_mod
    from . import sampler as sampler_mod
    from .models import ModelSpec

    def pool_sampler(gen, n):
        y = gen.integers(0, 2, size=n).astype(np.float64)
        X = gen.standard_normal((n, d))
        X[:, 0] += (separation / 2.0) * (2.0 * y - 1.0)
        return X, y

    instance, (X_val, y_val) = build_logistic_instance(
        pool_sampler, d, reference_n=reference_n, validation_n=validation_n, seed=seed
    )
    pool = data_mod.synth_classification(pool_n, d, separation, seed=seeding.mix(seed, 7))
    val_set = data_mod.Dataset(
        X_val, y_val.astype(np.int64), data_mod.Task.classification(2), role="validation"
    )
    spec = ModelSpec(
        "logistic_regression", {"l2": 0.0, "fit_intercept": False}, seed=0
    )
    grid = sampler_mod.CardinalityGrid((k,), lower_bound=k)
    point_ids = list(range(points))
    store = sampler_mod.run_campaign(
        pool, val_set, point_ids, grid, "per_cardinality", n_samples, spec,
        master_seed=seed, workers=workers, balanced=False, metric="test_loss",
    )
    rows = []
    all_ok = True
    for pid in point_ids:
        mean, stderr, n = sampler_mod.estimate_psi(store, pid, k)
        predicted = mestimator_leading_term(instance, pool.point(pid), k)
        ok = abs(mean - predicted) <= 3.0 * stderr + rel_slack * abs(predicted)
        all_ok &= ok
        rows.append(
            {
                "point_id": pid, "sampled_mean": mean, "stderr": stderr,
                "n": n, "predicted": predicted, "passed": bool(ok),
            }
        )
    return {
        "d": d, "separation": separation, "k": k, "n_samples": n_samples,
        "rel_slack": rel_slack, "points": rows, "passed": bool(all_ok),
    }


@dataclass(frozen=True)
class AlphaRateReport:
    median: float
    q25: float
    q75: float
    expected: float
    tolerance: float
    passed: bool
    n_fits: int


def alpha_rate_check(fits, expected_alpha: float, tolerance: float) -> AlphaRateReport:
    """Median and IQR of fitted decay exponents, flagged against the
    theoretical expectation."""
    alphas = np.asarray([f.alpha for f in fits], dtype=np.float64)
    if len(alphas) == 0:
        raise TheoryError("no fits to check")
    median = float(np.median(alphas))
    q25, q75 = (float(q) for q in np.percentile(alphas, [25, 75]))
    passed = abs(median - expected_alpha) <= tolerance
    return AlphaRateReport(
        median=median, q25=q25, q75=q75, expected=expected_alpha,
        tolerance=tolerance, passed=passed, n_fits=len(alphas),
    )
