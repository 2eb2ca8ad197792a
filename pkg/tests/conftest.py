import os

# Fix BLAS threading before numpy loads anywhere: campaign determinism
# contracts assume a fixed reduction order.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from pointscale import CardinalityGrid
from pointscale.data import Dataset, Task
from pointscale.sampler import RECORD_DTYPE, SampleStore


def make_power_law_store(
    n_points: int,
    m: int,
    c,
    alpha,
    sigma,
    beta,
    seed: int,
    k_min: int = 100,
    k_max: int = 1000,
    n_grid: int = 10,
    mode: str = "uniform",
) -> SampleStore:
    """Store of records drawn exactly from the Gaussian power-law model:
    delta ~ N(c k^-alpha, sigma^2 k^-beta), k uniform on a log-spaced grid."""
    rng = np.random.default_rng(seed)
    grid = CardinalityGrid.log_spaced(n_grid, k_min, k_max, lower_bound=min(k_min, 100))
    kvals = np.asarray(grid.values, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n_points,))
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n_points,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n_points,))
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n_points,))
    records = np.empty(n_points * m, dtype=RECORD_DTYPE)
    i = 0
    for pid in range(n_points):
        if mode == "uniform":
            ks = kvals[rng.integers(0, len(kvals), size=m)]
        else:
            reps = int(np.ceil(m / len(kvals)))
            ks = np.repeat(kvals, reps)[:m]
        mu = c[pid] * ks ** (-alpha[pid])
        noise = sigma[pid] * ks ** (-beta[pid] / 2.0) * rng.standard_normal(m)
        for k, delta in zip(ks, mu + noise):
            records[i] = (pid, int(k), delta, i, 0)
            i += 1
    metadata = {
        "format": "pointscale-campaign",
        "mode": mode,
        "grid": [int(v) for v in grid.values],
        "m": m,
        "synthetic_model": True,
    }
    store = SampleStore(metadata, records)
    return store.canonical_sort()


def feature_dataset(n: int, d: int, seed: int) -> Dataset:
    """Plain Gaussian features with random binary labels, for estimators that
    only consume (x, y)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = (rng.random(n) < 0.5).astype(np.int64)
    return Dataset(X, y, Task.classification(2))


@pytest.fixture(scope="session")
def classification_setup():
    """Pool/test pair shared by campaign-level tests."""
    from pointscale import synth_classification

    pool = synth_classification(2000, 10, 2.0, seed=1)
    test = synth_classification(1000, 10, 2.0, seed=2)
    return pool, test
