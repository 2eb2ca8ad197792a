"""Dataset ingestion, synthetic generators, and reproducible subset sampling."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding

ROLES = ("train-pool", "candidate-pool", "test", "validation")


class DataError(ValueError):
    """Raised for malformed inputs or invalid sampling requests."""


@dataclass(frozen=True)
class Task:
    kind: str  # "classification" | "regression"
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind == "classification":
            if self.num_classes is None or self.num_classes < 2:
                raise DataError("classification task needs num_classes >= 2")
        elif self.kind == "regression":
            if self.num_classes is not None:
                raise DataError("regression task has no classes")
        else:
            raise DataError(f"unknown task kind: {self.kind!r}")

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    @classmethod
    def classification(cls, num_classes: int) -> "Task":
        return cls("classification", num_classes)

    @classmethod
    def regression(cls) -> "Task":
        return cls("regression")


@dataclass(frozen=True)
class DataPoint:
    id: int
    x: np.ndarray
    y: int | float


@dataclass(frozen=True)
class DatasetView:
    """Immutable (X, y, task) triple handed to trainers and evaluators."""

    X: np.ndarray
    y: np.ndarray
    task: Task

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class Dataset:
    """Feature matrix plus labels. Ids are dense row indices 0..n-1.

    Immutable after construction; arrays are marked read-only so instances
    can be shared across workers.
    """

    X: np.ndarray
    y: np.ndarray
    task: Task
    role: str = "train-pool"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DataError("X must be a nonempty 2-d array")
        if not np.isfinite(X).all():
            raise DataError("non-finite feature value")
        if self.role not in ROLES:
            raise DataError(f"unknown role: {self.role!r}")
        if self.task.is_classification:
            y = np.ascontiguousarray(self.y, dtype=np.int64)
            if y.min(initial=0) < 0 or y.max(initial=0) >= self.task.num_classes:
                raise DataError("class label out of range")
        else:
            y = np.ascontiguousarray(self.y, dtype=np.float64)
            if not np.isfinite(y).all():
                raise DataError("non-finite label")
        if y.shape != (X.shape[0],):
            raise DataError("X and y length mismatch")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        self._class_ids: list[np.ndarray] | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def point(self, i: int) -> DataPoint:
        if not 0 <= i < self.n:
            raise DataError(f"point id {i} out of range")
        y = int(self.y[i]) if self.task.is_classification else float(self.y[i])
        return DataPoint(id=i, x=self.X[i], y=y)

    def points(self):
        for i in range(self.n):
            yield self.point(i)

    def view(self, ids=None) -> DatasetView:
        if ids is None:
            return DatasetView(self.X, self.y, self.task)
        ids = np.asarray(ids, dtype=np.int64)
        return DatasetView(self.X[ids], self.y[ids], self.task)

    def class_ids(self, c: int) -> np.ndarray:
        """Row ids of class ``c`` (classification only), cached."""
        if not self.task.is_classification:
            raise DataError("class_ids on a regression dataset")
        if self._class_ids is None:
            self._class_ids = [
                np.flatnonzero(self.y == k) for k in range(self.task.num_classes)
            ]
        return self._class_ids[c]

    def fingerprint(self) -> str:
        """Content hash used to match stores against datasets."""
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(self.y.tobytes())
        h.update(self.task.kind.encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SubsetSpec:
    k: int
    exclude: int | None = None
    balanced: bool = False
    seed: int = 0

    def validate(self, pool: Dataset) -> None:
        if self.k < 1:
            raise DataError("k must be >= 1")
        available = pool.n - (1 if self.exclude is not None else 0)
        if self.k > available:
            raise DataError(f"k={self.k} exceeds available points ({available})")
        if self.balanced and not pool.task.is_classification:
            raise DataError("balanced sampling requires a classification task")


@dataclass(frozen=True)
class CsvSchema:
    label: str
    task: str  # "classification" | "regression"
    class_map: dict | None = None
    role: str = "train-pool"


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Load a pre-embedded feature CSV.

    Header row required; the column named ``schema.label`` holds labels and
    every other column is a numeric feature. Classification labels are mapped
    to dense indices, either via ``schema.class_map`` or by sorting the
    distinct labels seen in the file.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("no data rows") from None
        if schema.label not in header:
            raise DataError(f"label column {schema.label!r} not found")
        label_idx = header.index(schema.label)
        feat_idx = [i for i in range(len(header)) if i != label_idx]
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in feat_idx])
            except (ValueError, IndexError):
                raise DataError(f"non-numeric feature cell at line {lineno}") from None
            labels.append(row[label_idx])
    if not rows:
        raise DataError("no data rows")
    X = np.asarray(rows, dtype=np.float64)

    if schema.task == "regression":
        try:
            y = np.asarray([float(v) for v in labels])
        except ValueError:
            raise DataError("non-numeric regression label") from None
        return Dataset(X, y, Task.regression(), role=schema.role)

    if schema.task != "classification":
        raise DataError(f"unknown task in schema: {schema.task!r}")
    if schema.class_map is not None:
        class_map = dict(schema.class_map)
        unseen = sorted(set(labels) - set(class_map))
        if unseen:
            raise DataError(f"label(s) not in class map: {unseen}")
        num_classes = max(class_map.values()) + 1
    else:
        class_map = {lab: i for i, lab in enumerate(sorted(set(labels)))}
        num_classes = len(class_map)
    y = np.asarray([class_map[v] for v in labels], dtype=np.int64)
    ds = Dataset(X, y, Task.classification(num_classes), role=schema.role)
    ds.metadata["class_map"] = class_map
    return ds


def _covariance_matrix(covariance_spec, d: int) -> np.ndarray:
    if isinstance(covariance_spec, str):
        if covariance_spec != "identity":
            raise DataError(f"unknown covariance spec: {covariance_spec!r}")
        return np.eye(d)
    arr = np.asarray(covariance_spec, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape != (d,):
            raise DataError("diagonal covariance length != d")
        if (arr <= 0).any():
            raise DataError("diagonal covariance must be positive")
        return np.diag(arr)
    if arr.shape != (d, d):
        raise DataError("covariance matrix shape mismatch")
    return arr


def synth_linear(
    n: int,
    d: int,
    sigma_noise: float,
    covariance_spec="identity",
    beta_star_spec="ones",
    seed: int = 0,
    role: str = "train-pool",
) -> Dataset:
    """Gaussian-design linear data: x ~ N(0, Sigma), y = x.beta* + eps.

    beta*, Sigma and the noise level are kept in ``metadata`` so downstream
    consumers (population-loss evaluators, verification oracles) can recover
    the generating distribution.
    """
    if n < 1 or d < 1 or sigma_noise < 0:
        raise DataError("need n >= 1, d >= 1, sigma_noise >= 0")
    Sigma = _covariance_matrix(covariance_spec, d)
    try:
        chol = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise DataError("covariance is not SPD") from None
    if isinstance(beta_star_spec, str):
        if beta_star_spec != "ones":
            raise DataError(f"unknown beta_star spec: {beta_star_spec!r}")
        beta_star = np.ones(d)
    else:
        beta_star = np.asarray(beta_star_spec, dtype=np.float64)
        if beta_star.shape != (d,):
            raise DataError("beta_star length != d")
    gen = seeding.rng(seed)
    X = gen.standard_normal((n, d)) @ chol.T
    eps = sigma_noise * gen.standard_normal(n)
    y = X @ beta_star + eps
    meta = {
        "generator": "synth_linear",
        "beta_star": beta_star.tolist(),
        "covariance": Sigma.tolist(),
        "sigma_noise": float(sigma_noise),
        "seed": int(seed),
    }
    return Dataset(X, y, Task.regression(), role=role, metadata=meta)


def synth_classification(
    n: int, d: int, class_separation: float, seed: int = 0, role: str = "train-pool"
) -> Dataset:
    """Two-class Gaussian mixture with means -+(separation/2) along axis 0.

    Labels alternate with the row index, so class counts are balanced up to
    rounding and class 0 receives the extra point when n is odd.
    """
    if n < 2 or d < 1 or class_separation < 0:
        raise DataError("need n >= 2, d >= 1, separation >= 0")
    gen = seeding.rng(seed)
    y = np.arange(n, dtype=np.int64) % 2
    X = gen.standard_normal((n, d))
    X[:, 0] += (class_separation / 2.0) * (2.0 * y - 1.0)
    meta = {
        "generator": "synth_classification",
        "class_separation": float(class_separation),
        "seed": int(seed),
    }
    return Dataset(X, y, Task.classification(2), role=role, metadata=meta)


def sample_subset(pool: Dataset, spec: SubsetSpec) -> np.ndarray:
    """Draw ``spec.k`` distinct row ids without replacement.

    With ``balanced=True`` (classification only) the class counts differ by
    at most one: each class receives k // C points and the remainder is
    assigned round-robin by ascending class index. ``spec.exclude`` is never
    returned. Pure function of (pool, spec).
    """
    spec.validate(pool)
    gen = seeding.rng(spec.seed)
    if not spec.balanced:
        ids = np.arange(pool.n, dtype=np.int64)
        if spec.exclude is not None:
            ids = ids[ids != spec.exclude]
        return gen.choice(ids, size=spec.k, replace=False)

    C = pool.task.num_classes
    base, rem = divmod(spec.k, C)
    chosen = []
    for c in range(C):
        target = base + (1 if c < rem else 0)
        ids = pool.class_ids(c)
        if spec.exclude is not None and spec.exclude in ids:
            ids = ids[ids != spec.exclude]
        if target > len(ids):
            raise DataError(
                f"class {c} has {len(ids)} available points, need {target}"
            )
        if target:
            chosen.append(gen.choice(ids, size=target, replace=False))
    return np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)


def write_sidecar(dataset: Dataset, path) -> None:
    """Serialize dataset metadata (generator parameters etc.) as JSON."""
    payload = {
        "n": dataset.n,
        "d": dataset.d,
        "task": dataset.task.kind,
        "num_classes": dataset.task.num_classes,
        "role": dataset.role,
        "fingerprint": dataset.fingerprint(),
        "metadata": dataset.metadata,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
