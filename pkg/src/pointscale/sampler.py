"""Sampling campaigns for per-point loss contributions.

A campaign draws, for each evaluated point z, many subsets D of the training
pool, trains models with and without z on the same subset, and records the
loss difference. Records go into an append-only binary store whose canonical
ordering is invariant to worker count and scheduling.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np

from . import models, seeding
from .data import Dataset, DatasetView, SubsetSpec, sample_subset

STORE_MAGIC = b"PSST"
STORE_VERSION = 1

RECORD_DTYPE = np.dtype(
    [
        ("point_id", "<u4"),
        ("k", "<u4"),
        ("delta", "<f8"),
        ("seed", "<u8"),
        ("status", "u1"),
    ]
)

STATUS_OK = 0
STATUS_FAILED = 1

METRICS = ("test_loss", "population_mse")


class StoreError(RuntimeError):
    """Raised for malformed store files or missing records."""


@dataclass(frozen=True)
class CardinalityGrid:
    """Ascending dataset sizes at which contributions are sampled."""

    values: tuple
    lower_bound: int = 100

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if not vals:
            raise ValueError("empty cardinality grid")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("grid values must be strictly increasing")
        if vals[0] < self.lower_bound:
            raise ValueError(
                f"grid minimum {vals[0]} below lower bound {self.lower_bound}"
            )
        object.__setattr__(self, "values", vals)

    @classmethod
    def log_spaced(cls, count: int, k_min: int, k_max: int, lower_bound: int = 100):
        """``count`` log-spaced sizes in [k_min, k_max], deduplicated after rounding."""
        if count < 1 or k_min > k_max:
            raise ValueError("need count >= 1 and k_min <= k_max")
        raw = np.geomspace(k_min, k_max, count)
        vals = sorted(set(int(round(v)) for v in raw))
        return cls(tuple(vals), lower_bound=lower_bound)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class SampleRecord:
    point_id: int
    k: int
    delta: float
    seed: int
    model_kind: str
    status: int = STATUS_OK


class SampleStore:
    """Append-only record collection with immutable campaign metadata."""

    def __init__(self, metadata: dict, records: np.ndarray | None = None):
        self.metadata = dict(metadata)
        if records is None:
            records = np.empty(0, dtype=RECORD_DTYPE)
        self._records = np.asarray(records, dtype=RECORD_DTYPE)

    # -- record access ---------------------------------------------------

    @property
    def records(self) -> np.ndarray:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def append(self, records: np.ndarray) -> None:
        self._records = np.concatenate([self._records, np.asarray(records, RECORD_DTYPE)])

    def canonical_sort(self) -> "SampleStore":
        """Sort records by (point_id, k, seed); makes bytes order-invariant."""
        self._records = np.sort(self._records, order=["point_id", "k", "seed"])
        return self

    def point_ids(self) -> np.ndarray:
        return np.unique(self._records["point_id"])

    def deltas(self, point_id: int, k: int | None = None) -> np.ndarray:
        """Successful deltas for a point, optionally at one cardinality."""
        r = self._records
        mask = (r["point_id"] == point_id) & (r["status"] == STATUS_OK)
        if k is not None:
            mask &= r["k"] == k
        return r["delta"][mask]

    def samples_for(self, point_id: int) -> np.ndarray:
        """(m, 2) array of (k, delta) rows for the fitting module."""
        r = self._records
        mask = (r["point_id"] == point_id) & (r["status"] == STATUS_OK)
        return np.column_stack([r["k"][mask].astype(np.float64), r["delta"][mask]])

    def failure_count(self, point_id: int | None = None) -> int:
        r = self._records
        mask = r["status"] != STATUS_OK
        if point_id is not None:
            mask &= r["point_id"] == point_id
        return int(mask.sum())

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(np.uint32(STORE_VERSION).tobytes())
            fh.write(np.uint32(len(meta)).tobytes())
            fh.write(meta)
            fh.write(self._records.tobytes())

    @classmethod
    def load(cls, path) -> "SampleStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != STORE_MAGIC:
            raise StoreError(f"{path}: not a sample store")
        version = int(np.frombuffer(blob[4:8], "<u4")[0])
        if version != STORE_VERSION:
            raise StoreError(f"{path}: unsupported store version {version}")
        meta_len = int(np.frombuffer(blob[8:12], "<u4")[0])
        metadata = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
        records = np.frombuffer(blob[12 + meta_len :], dtype=RECORD_DTYPE).copy()
        return cls(metadata, records)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("point_id,k,delta,seed,status\n")
            for rec in self._records:
                fh.write(
                    f"{int(rec['point_id'])},{int(rec['k'])},{rec['delta']!r},"
                    f"{int(rec['seed'])},{int(rec['status'])}\n"
                )

    @classmethod
    def merge(cls, stores) -> "SampleStore":
        stores = list(stores)
        if not stores:
            raise StoreError("nothing to merge")
        meta = stores[0].metadata
        for s in stores[1:]:
            if s.metadata != meta:
                raise StoreError("cannot merge stores with different campaigns")
        merged = cls(meta, np.concatenate([s.records for s in stores]))
        return merged.canonical_sort()


# ----------------------------------------------------------------------
# point estimates
# ----------------------------------------------------------------------


def estimate_psi(store: SampleStore, point_id: int, k: int):
    """Sample mean of the contribution at one cardinality: (mean, stderr, n).

    stderr is None when only one record exists.
    """
    deltas = store.deltas(point_id, k)
    n = len(deltas)
    if n == 0:
        raise StoreError(f"no records at point_id={point_id}, k={k}")
    mean = float(np.mean(deltas))
    stderr = float(np.std(deltas, ddof=1) / np.sqrt(n)) if n >= 2 else None
    return mean, stderr, n


def estimate_variance(store: SampleStore, point_id: int, k: int):
    """Unbiased sample variance at one cardinality: (variance, n)."""
    deltas = store.deltas(point_id, k)
    n = len(deltas)
    if n < 2:
        raise StoreError(f"need >= 2 records at point_id={point_id}, k={k}")
    return float(np.var(deltas, ddof=1)), n


# ----------------------------------------------------------------------
# single-sample contribution
# ----------------------------------------------------------------------


def _make_evaluator(metric: str, test_view: DatasetView | None, pool: Dataset):
    if metric == "test_loss":
        if test_view is None:
            raise ValueError("test_loss metric needs a test set")
        return lambda model: models.eval_loss(model, test_view)
    if metric == "population_mse":
        meta = pool.metadata
        try:
            beta_star = np.asarray(meta["beta_star"], dtype=np.float64)
            Sigma = np.asarray(meta["covariance"], dtype=np.float64)
            sigma2 = float(meta["sigma_noise"]) ** 2
        except KeyError as exc:
            raise ValueError(
                "population_mse metric needs beta_star/covariance/sigma_noise "
                "in the pool metadata"
            ) from exc
        return lambda model: models.population_mse(model, beta_star, Sigma, sigma2)
    raise ValueError(f"unknown metric: {metric!r}")


def _delta_once(
    pool: Dataset,
    z_x: np.ndarray,
    z_y,
    k: int,
    exclude_id: int | None,
    balanced: bool,
    model_spec: models.ModelSpec,
    seed: int,
    evaluator,
) -> float:
    subset = sample_subset(pool, SubsetSpec(k, exclude_id, balanced, seed))
    X_aug = np.concatenate([pool.X[subset], np.asarray(z_x)[None, :]])
    y_aug = np.concatenate([pool.y[subset], np.asarray([z_y], dtype=pool.y.dtype)])
    task = pool.task
    spec = model_spec
    if spec.kind == "mlp":
        # both trainings share the weight-init seed so delta isolates the data
        spec = spec.with_seed(seeding.mix(seed, seeding.MODEL_INIT))
    without = models.train(spec, DatasetView(X_aug[:-1], y_aug[:-1], task))
    with_z = models.train(spec, DatasetView(X_aug, y_aug, task), init=without)
    return evaluator(without) - evaluator(with_z)


def sample_contribution(
    z,
    k: int,
    pool: Dataset,
    test_set,
    model_spec: models.ModelSpec,
    seed: int,
    *,
    balanced: bool | None = None,
    exclude: bool = True,
    metric: str = "test_loss",
) -> SampleRecord:
    """One observed contribution of point ``z`` at cardinality ``k``.

    Draws D of size k from the pool (excluding z when it is a pool member),
    trains the model on D and on D + {z}, and returns the loss difference
    eval(f_D) - eval(f_{D+z}). Deterministic given all arguments.
    """
    if balanced is None:
        balanced = pool.task.is_classification
    test_view = None
    if test_set is not None:
        test_view = test_set.view() if isinstance(test_set, Dataset) else test_set
    evaluator = _make_evaluator(metric, test_view, pool)
    exclude_id = z.id if exclude else None
    delta = _delta_once(
        pool, z.x, z.y, k, exclude_id, balanced, model_spec, seed, evaluator
    )
    return SampleRecord(z.id, k, float(delta), seed, model_spec.kind)


# ----------------------------------------------------------------------
# campaigns
# ----------------------------------------------------------------------

_CHUNK = 512  # max samples per parallel task


@dataclass
class _CampaignContext:
    pool: Dataset
    test_view: DatasetView | None
    eval_X: np.ndarray  # features of evaluated points
    eval_y: np.ndarray
    exclude: bool  # evaluated points are pool members
    balanced: bool
    metric: str
    model_spec: models.ModelSpec

    def evaluator(self):
        return _make_evaluator(self.metric, self.test_view, self.pool)


_WORKER_CTX: _CampaignContext | None = None
_WORKER_EVAL = None


def _init_worker(ctx: _CampaignContext) -> None:
    global _WORKER_CTX, _WORKER_EVAL
    _WORKER_CTX = ctx
    _WORKER_EVAL = ctx.evaluator()


def _task_records(ctx, evaluator, task) -> np.ndarray:
    point_id, ks, seeds = task
    out = np.empty(len(ks), dtype=RECORD_DTYPE)
    z_x = ctx.eval_X[point_id]
    z_y = ctx.eval_y[point_id]
    exclude_id = int(point_id) if ctx.exclude else None
    for i, (k, seed) in enumerate(zip(ks, seeds)):
        status = STATUS_OK
        try:
            delta = _delta_once(
                ctx.pool, z_x, z_y, int(k), exclude_id, ctx.balanced,
                ctx.model_spec, int(seed), evaluator,
            )
        except models.TrainingError:
            delta = np.nan
            status = STATUS_FAILED
        out[i] = (point_id, k, delta, seed, status)
    return out


def _run_task(task) -> np.ndarray:
    return _task_records(_WORKER_CTX, _WORKER_EVAL, task)


def _build_tasks(points, grid, mode, m, master_seed):
    """Task list of (point_id, k array, seed array); seeds depend only on
    (master_seed, point_id, sample ordinal), never on scheduling."""
    tasks = []
    for pid in points:
        if mode == "per_cardinality":
            ks = np.repeat(np.asarray(grid.values, dtype=np.int64), m)
        elif mode == "uniform":
            kgen = seeding.rng(seeding.mix(master_seed, seeding.K_DRAW, pid))
            vals = np.asarray(grid.values, dtype=np.int64)
            ks = vals[kgen.integers(0, len(vals), size=m)]
        else:
            raise ValueError(f"unknown sampling mode: {mode!r}")
        seeds = np.array(
            [seeding.mix(master_seed, seeding.SUBSET, pid, i) for i in range(len(ks))],
            dtype=np.uint64,
        )
        for lo in range(0, len(ks), _CHUNK):
            tasks.append((int(pid), ks[lo : lo + _CHUNK], seeds[lo : lo + _CHUNK]))
    return tasks


def run_campaign(
    pool: Dataset,
    test_set,
    points,
    grid: CardinalityGrid,
    mode: str,
    m: int,
    model_spec: models.ModelSpec,
    master_seed: int,
    *,
    workers: int = 1,
    balanced: bool | None = None,
    metric: str = "test_loss",
    eval_dataset: Dataset | None = None,
) -> SampleStore:
    """Sample contributions for every point in ``points``.

    mode "per_cardinality" draws m samples at every grid size per point;
    mode "uniform" draws m samples per point with sizes drawn uniformly from
    the grid. Results are identical for any worker count.

    ``eval_dataset`` holds the evaluated points when they are not members of
    the pool (e.g. a candidate set); by default points index into the pool
    and each point is excluded from its own subsets.
    """
    points = [int(p) for p in points]
    if not points:
        raise ValueError("no points to evaluate")
    if balanced is None:
        balanced = pool.task.is_classification
    external = eval_dataset is not None
    source = eval_dataset if external else pool
    max_k = max(grid.values)
    available = pool.n - (0 if external else 1)
    if max_k > available:
        raise ValueError(f"grid maximum {max_k} exceeds pool capacity {available}")

    test_view = None
    if test_set is not None:
        test_view = test_set.view() if isinstance(test_set, Dataset) else test_set
    ctx = _CampaignContext(
        pool=pool,
        test_view=test_view,
        eval_X=source.X,
        eval_y=source.y,
        exclude=not external,
        balanced=balanced,
        metric=metric,
        model_spec=model_spec,
    )
    if balanced and pool.task.is_classification:
        for c in range(pool.task.num_classes):
            pool.class_ids(c)  # warm the cache before forking

    tasks = _build_tasks(points, grid, mode, m, master_seed)
    if workers <= 1:
        evaluator = ctx.evaluator()
        chunks = [_task_records(ctx, evaluator, t) for t in tasks]
    else:
        mp = multiprocessing.get_context("fork")
        with mp.Pool(workers, initializer=_init_worker, initargs=(ctx,)) as pool_exec:
            chunks = list(pool_exec.imap_unordered(_run_task, tasks))

    records = np.concatenate(chunks) if chunks else np.empty(0, RECORD_DTYPE)
    metadata = {
        "format": "pointscale-campaign",
        "grid": list(grid.values),
        "grid_lower_bound": grid.lower_bound,
        "mode": mode,
        "m": int(m),
        "model_spec": model_spec.to_dict(),
        "master_seed": int(master_seed),
        "balanced": bool(balanced),
        "metric": metric,
        "points": points,
        "pool_fingerprint": pool.fingerprint(),
        "test_fingerprint": test_set.fingerprint() if isinstance(test_set, Dataset) else None,
        "eval_fingerprint": source.fingerprint() if external else "pool",
    }
    store = SampleStore(metadata, records)
    return store.canonical_sort()


def replay_record(
    record,
    pool: Dataset,
    test_set,
    metadata: dict,
    eval_dataset: Dataset | None = None,
) -> float:
    """Recompute one record's delta from its stored seed and the campaign
    metadata; used to audit store integrity."""
    spec = models.ModelSpec.from_dict(metadata["model_spec"])
    test_view = None
    if test_set is not None:
        test_view = test_set.view() if isinstance(test_set, Dataset) else test_set
    evaluator = _make_evaluator(metadata["metric"], test_view, pool)
    external = metadata.get("eval_fingerprint", "pool") != "pool"
    source = eval_dataset if external else pool
    pid = int(record["point_id"])
    exclude_id = None if external else pid
    return _delta_once(
        pool,
        source.X[pid],
        source.y[pid],
        int(record["k"]),
        exclude_id,
        bool(metadata["balanced"]),
        spec,
        int(record["seed"]),
        evaluator,
    )
