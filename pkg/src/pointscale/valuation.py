"""Applications of fitted scaling laws: Distributional-Shapley-style scores,
size-aware point selection, point-addition experiments, and fit analyses."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import models, seeding
from .data import Dataset, DatasetView, SubsetSpec, sample_subset
from .fitting import ScalingFit, predict_psi
from .sampler import SampleStore


class ValuationError(ValueError):
    """Raised for invalid valuation requests."""


@dataclass(frozen=True)
class ValuationScore:
    point_id: int
    psi: float
    method: str  # "scaling(<fit method>)" | "monte_carlo"
    k_min: int
    k_max: int
    n_samples_used: int

    def __post_init__(self):
        if self.k_min > self.k_max:
            raise ValuationError("k_min must not exceed k_max")
        if not np.isfinite(self.psi):
            raise ValuationError("non-finite valuation score")


def shapley_from_scaling(fit: ScalingFit, k_min: int, k_max: int) -> ValuationScore:
    """Uniform average of predicted contributions over k in [k_min, k_max],
    summed term by term."""
    if k_min < 1 or k_min > k_max:
        raise ValuationError("need 1 <= k_min <= k_max")
    ks = np.arange(k_min, k_max + 1, dtype=np.float64)
    psi = float(np.mean(fit.c * ks ** (-fit.alpha)))
    return ValuationScore(
        point_id=-1 if fit.point_id is None else fit.point_id,
        psi=psi,
        method=f"scaling({fit.method})",
        k_min=k_min,
        k_max=k_max,
        n_samples_used=fit.diagnostics.n_samples,
    )


def shapley_monte_carlo(
    store: SampleStore, point_id: int, k_min: int, k_max: int
) -> ValuationScore:
    """Plain mean of a point's sampled contributions; unbiased when the
    campaign drew sizes uniformly over a grid spanning [k_min, k_max]."""
    meta = store.metadata
    if meta.get("mode") != "uniform":
        raise ValuationError("store was not sampled in uniform mode")
    grid = meta.get("grid", [])
    if not grid or min(grid) != k_min or max(grid) != k_max:
        raise ValuationError(
            f"store grid [{min(grid)}, {max(grid)}] does not span [{k_min}, {k_max}]"
        )
    deltas = store.deltas(point_id)
    if len(deltas) == 0:
        raise ValuationError(f"no records for point {point_id}")
    return ValuationScore(
        point_id=point_id,
        psi=float(np.mean(deltas)),
        method="monte_carlo",
        k_min=k_min,
        k_max=k_max,
        n_samples_used=len(deltas),
    )


def select_points(fits, k_target: int, m: int) -> list:
    """Ids of the m points with the largest predicted contribution at
    k_target; ties break toward the lower point id."""
    fits = list(fits)
    if not fits:
        raise ValuationError("no fits to select from")
    if m > len(fits):
        raise ValuationError("cannot select more points than fits")
    scored = sorted(
        ((-predict_psi(f, k_target), f.point_id) for f in fits),
    )
    return [pid for _, pid in scored[:m]]


@dataclass(frozen=True)
class PointAdditionResult:
    mean_improvement: float
    std_improvement: float
    baseline_accuracy: float
    n_trials: int
    n_failed: int


def point_addition_eval(
    pool: Dataset,
    test_set,
    candidates: Dataset,
    selected_ids,
    preceding_size: int,
    trials: int,
    model_spec: models.ModelSpec,
    master_seed: int,
    *,
    balanced: bool = True,
) -> PointAdditionResult:
    """Accuracy gain from adding the selected candidate points.

    Each trial draws a preceding dataset from the pool, trains with and
    without the selected points, and records the test-accuracy difference.
    Trial seeds derive from (master_seed, trial index), so different
    selection methods evaluated with the same master seed share preceding
    sets.
    """
    selected_ids = list(selected_ids)
    test_view = test_set.view() if isinstance(test_set, Dataset) else test_set
    task = pool.task
    if selected_ids:
        add_X = candidates.X[np.asarray(selected_ids, dtype=np.int64)]
        add_y = candidates.y[np.asarray(selected_ids, dtype=np.int64)]
    improvements = []
    baselines = []
    n_failed = 0
    for t in range(trials):
        seed_t = seeding.mix(master_seed, seeding.TRIAL, t)
        ids = sample_subset(
            pool, SubsetSpec(preceding_size, None, balanced and task.is_classification, seed_t)
        )
        try:
            base = models.train(model_spec, pool.view(ids))
            base_acc = models.eval_accuracy(base, test_view)
            if selected_ids:
                X_aug = np.concatenate([pool.X[ids], add_X])
                y_aug = np.concatenate([pool.y[ids], add_y])
                aug = models.train(model_spec, DatasetView(X_aug, y_aug, task))
                aug_acc = models.eval_accuracy(aug, test_view)
            else:
                aug_acc = base_acc
        except models.TrainingError:
            n_failed += 1
            continue
        improvements.append(aug_acc - base_acc)
        baselines.append(base_acc)
    if not improvements:
        raise ValuationError("every trial failed")
    imp = np.asarray(improvements)
    return PointAdditionResult(
        mean_improvement=float(np.mean(imp)),
        std_improvement=float(np.std(imp, ddof=1)) if len(imp) > 1 else 0.0,
        baseline_accuracy=float(np.mean(baselines)),
        n_trials=len(imp),
        n_failed=n_failed,
    )


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.std(a) == 0.0 or np.std(b) == 0.0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def boundary_correlation(fits, dataset: Dataset, model_spec: models.ModelSpec) -> dict:
    """Correlate fitted parameters with signed distance to the decision
    boundary of one logistic model trained on all evaluated points."""
    if not (dataset.task.is_classification and dataset.task.num_classes == 2):
        raise ValuationError("boundary analysis needs a binary classification task")
    if model_spec.kind != "logistic_regression":
        raise ValuationError("boundary analysis needs a logistic model spec")
    fits = list(fits)
    if not fits:
        raise ValuationError("no fits")
    ids = np.asarray([f.point_id for f in fits], dtype=np.int64)
    model = models.train(model_spec, dataset.view(ids))
    rows = []
    for f in fits:
        dist = models.decision_boundary_distance(model, dataset.X[f.point_id])
        rows.append(
            {
                "point_id": f.point_id,
                "distance": dist,
                "alpha": f.alpha,
                "log_abs_c": float(np.log(abs(f.c))) if f.c != 0.0 else None,
            }
        )
    dists = np.asarray([r["distance"] for r in rows])
    alphas = np.asarray([r["alpha"] for r in rows])
    with_c = [r for r in rows if r["log_abs_c"] is not None]
    pearson_logc = (
        _pearson(
            np.asarray([r["log_abs_c"] for r in with_c]),
            np.asarray([r["distance"] for r in with_c]),
        )
        if len(with_c) >= 2
        else None
    )
    return {
        "pearson_alpha_vs_distance": _pearson(alphas, dists),
        "pearson_logc_vs_distance": pearson_logc,
        "per_point_rows": rows,
    }


def cross_model_correlation(fits_a, fits_b) -> dict:
    """Pearson correlation of fitted alpha and c across two fit sets on the
    same points, excluding points whose fit quality is below r2 = 0.8 in
    either set."""
    map_a = {f.point_id: f for f in fits_a}
    map_b = {f.point_id: f for f in fits_b}
    if set(map_a) != set(map_b):
        raise ValuationError("fit sets cover different points")

    def reliable(f):
        return f.diagnostics.r2 is None or f.diagnostics.r2 >= 0.8

    common = [p for p in sorted(map_a) if reliable(map_a[p]) and reliable(map_b[p])]
    if not common:
        raise ValuationError("no reliable points in common after the r2 filter")
    alphas_a = np.asarray([map_a[p].alpha for p in common])
    alphas_b = np.asarray([map_b[p].alpha for p in common])
    c_a = np.asarray([map_a[p].c for p in common])
    c_b = np.asarray([map_b[p].c for p in common])
    return {
        "pearson_alpha": _pearson(alphas_a, alphas_b),
        "pearson_c": _pearson(c_a, c_b),
        "n_used": len(common),
    }


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def write_scores_csv(scores, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_id,psi,method,k_min,k_max\n")
        for s in scores:
            fh.write(f"{s.point_id},{s.psi!r},{s.method},{s.k_min},{s.k_max}\n")


def write_scores_json(scores, path) -> None:
    payload = [
        {
            "point_id": s.point_id,
            "psi": s.psi,
            "method": s.method,
            "k_min": s.k_min,
            "k_max": s.k_max,
            "n_samples_used": s.n_samples_used,
        }
        for s in scores
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
