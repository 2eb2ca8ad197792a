"""Per-point scaling-law estimators.

Three fitting routes are provided:

* ``fit_loglinear`` -- ordinary least squares of log|mean contribution| on
  log k, usable when per-cardinality means are available.
* ``fit_likelihood`` -- Gaussian maximum likelihood on raw contribution
  samples, modeling the mean as c / k^alpha and the variance as
  sigma^2 / k^beta. The optimizer takes Adam steps on (alpha, beta) only;
  c and sigma^2 are profiled out analytically at every step.
* ``fit_variance_law`` -- log-log OLS for the variance decay on its own.

All fits are pure functions; fitting different points can run concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class FittingError(ValueError):
    """Raised when a fit cannot be produced from the given samples."""


@dataclass(frozen=True)
class FitDiagnostics:
    r2: float | None = None
    n_samples: int = 0
    nll: float | None = None
    converged: bool = True
    warnings: tuple = ()
    dropped_zeros: int = 0


@dataclass(frozen=True)
class ScalingFit:
    """Fitted scaling parameters for one data point.

    The mean contribution at size k is c / k^alpha; the sample variance is
    sigma2 / k^beta (absent for pure log-linear fits). c may be negative:
    some points have harmful contributions.
    """

    c: float
    alpha: float
    sigma2: float | None
    beta: float | None
    method: str  # loglinear | likelihood | amortized
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)
    point_id: int | None = None


def predict_psi(fit: ScalingFit, k):
    """Expected contribution c * k^(-alpha) at dataset size k."""
    k = np.asarray(k, dtype=np.float64)
    out = fit.c * k ** (-fit.alpha)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------
# log-space OLS on per-cardinality means
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LogLinearFit:
    alpha: float
    log_abs_c: float
    sign_c: int
    r2: float
    n_used: int
    n_dropped_zero: int

    @property
    def c(self) -> float:
        return self.sign_c * math.exp(self.log_abs_c)

    def to_scaling_fit(self, point_id: int | None = None) -> ScalingFit:
        diag = FitDiagnostics(
            r2=self.r2, n_samples=self.n_used, dropped_zeros=self.n_dropped_zero
        )
        return ScalingFit(
            c=self.c, alpha=self.alpha, sigma2=None, beta=None,
            method="loglinear", diagnostics=diag, point_id=point_id,
        )


def _line_fit(x: np.ndarray, y: np.ndarray):
    """Least-squares line y = a*x + b with the usual R^2. Exact-fit inputs
    with zero spread in y report R^2 = 1."""
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise FittingError("need at least two distinct cardinalities")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    sse = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    if sst == 0.0:
        r2 = 1.0 if sse <= 1e-24 else 0.0
    else:
        r2 = 1.0 - sse / sst
    return slope, intercept, r2


def fit_loglinear(pairs) -> LogLinearFit:
    """OLS of log|psi_hat| on log k over (k, psi_hat) pairs.

    The slope is -alpha and the intercept log|c|. Zero means cannot be
    log-transformed and are dropped (counted in the result); the sign of c
    is the majority sign of the retained means, ties resolving positive.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FittingError("pairs must be (k, psi_hat) rows")
    k, psi = arr[:, 0], arr[:, 1]
    keep = psi != 0.0
    dropped = int((~keep).sum())
    k, psi = k[keep], psi[keep]
    if len(psi) < 2:
        raise FittingError("fewer than 2 usable pairs after dropping zeros")
    slope, intercept, r2 = _line_fit(np.log(k), np.log(np.abs(psi)))
    sign = 1 if int((psi > 0).sum()) >= int((psi < 0).sum()) else -1
    return LogLinearFit(
        alpha=-slope, log_abs_c=intercept, sign_c=sign, r2=r2,
        n_used=len(psi), n_dropped_zero=dropped,
    )


# ----------------------------------------------------------------------
# Gaussian likelihood pieces
# ----------------------------------------------------------------------


def nll(delta, k, c, alpha, sigma2, beta):
    """Negative log-likelihood of one contribution under the Gaussian model
    N(c k^-alpha, sigma2 k^-beta):

        0.5 log(2 pi) + 0.5 log(sigma2) - (beta/2) log k
            + (delta - c k^-alpha)^2 / (2 sigma2 k^-beta)
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise FittingError("sigma2 must be positive")
    k = np.asarray(k, dtype=np.float64)
    logk = np.log(k)
    resid = np.asarray(delta, dtype=np.float64) - c * np.exp(-alpha * logk)
    out = (
        0.5 * LOG_2PI
        + 0.5 * np.log(sigma2)
        - 0.5 * beta * logk
        + resid**2 * np.exp(beta * logk) / (2.0 * sigma2)
    )
    return float(out) if out.ndim == 0 else out


def _split_samples(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise FittingError("samples must be nonempty (k, delta) rows")
    if np.any(arr[:, 0] < 1):
        raise FittingError("cardinalities must be >= 1")
    return arr[:, 0], arr[:, 1]


def analytic_c(alpha: float, beta: float, samples) -> float:
    """Closed-form minimizer of the NLL in c at fixed (alpha, beta):

        c = sum_i k_i^(beta - alpha) delta_i / sum_i k_i^(beta - 2 alpha)
    """
    ks, ds = _split_samples(samples)
    lk = np.log(ks)
    num = float(np.sum(np.exp((beta - alpha) * lk) * ds))
    den = float(np.sum(np.exp((beta - 2.0 * alpha) * lk)))
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den if den != 0.0 else math.inf * np.sign(num) if num else math.nan


def analytic_sigma2(alpha: float, beta: float, c: float, samples) -> float:
    """Closed-form minimizer of the NLL in sigma^2 at fixed (alpha, beta, c):

        sigma^2 = sum_i k_i^beta (delta_i - c k_i^-alpha)^2 / m
    """
    ks, ds = _split_samples(samples)
    lk = np.log(ks)
    resid = ds - c * np.exp(-alpha * lk)
    return float(np.mean(np.exp(beta * lk) * resid**2))


def _reduced_objective(lk, ds, A, B, floor):
    """Mean NLL and its (alpha, beta) gradient with c, sigma^2 profiled out.

    A, B are arrays of candidate (alpha, beta) pairs. By the envelope
    theorem, the gradient of the profiled objective equals the partial
    derivative of the full NLL at the analytic c and sigma^2.
    """
    ka = np.exp(-np.outer(A, lk))
    kb = np.exp(np.outer(B, lk))
    wa = kb * ka
    den = np.sum(wa * ka, axis=1)
    num = wa @ ds
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(den != 0.0, num / den, 0.0)
    r = ds[None, :] - c[:, None] * ka
    kbr2 = kb * r * r
    s2_raw = np.mean(kbr2, axis=1)
    s2 = np.maximum(s2_raw, floor)
    mean_lk = float(np.mean(lk))
    nll_mean = 0.5 * LOG_2PI + 0.5 * np.log(s2) - 0.5 * B * mean_lk + s2_raw / (2.0 * s2)
    g_alpha = np.mean(kb * r * (c[:, None] * ka) * lk[None, :], axis=1) / s2
    g_beta = -0.5 * mean_lk + np.mean(kbr2 * lk[None, :], axis=1) / (2.0 * s2)
    return nll_mean, g_alpha, g_beta, c, s2


@dataclass(frozen=True)
class LikelihoodConfig:
    min_samples: int = 20
    steps: int = 500
    lr: float = 0.05
    alpha_bounds: tuple = (0.0, 10.0)
    beta_bounds: tuple = (0.0, 8.0)
    alpha_starts: tuple = (0.5, 1.0, 2.0)
    beta_starts: tuple = (1.0, 2.0)
    sigma2_floor: float = 1e-18
    grad_tol: float = 1e-6


def likelihood_objective(samples, alpha: float, beta: float, sigma2_floor: float = 1e-18):
    """Profiled mean NLL and gradient at one (alpha, beta); exposed for
    gradient checks."""
    ks, ds = _split_samples(samples)
    lk = np.log(ks)
    nll_mean, ga, gb, _, _ = _reduced_objective(
        lk, ds, np.asarray([alpha]), np.asarray([beta]), sigma2_floor
    )
    return float(nll_mean[0]), float(ga[0]), float(gb[0])


def fit_likelihood(samples, config: LikelihoodConfig | None = None) -> ScalingFit:
    """Maximum-likelihood scaling fit from raw (k, delta) samples.

    Runs Adam on (alpha, beta) from a small grid of starting points, with a
    cosine-decayed learning rate, substituting the analytic c and sigma^2 at
    every step and clamping the exponents to their bounds. The start with
    the lowest final mean NLL wins.
    """
    cfg = config or LikelihoodConfig()
    ks, ds = _split_samples(samples)
    m = len(ds)
    if m < cfg.min_samples:
        raise FittingError(f"need at least {cfg.min_samples} samples, got {m}")
    warnings = []
    if len(np.unique(ks)) == 1:
        warnings.append("single-cardinality")
    if not np.any(ds != 0.0):
        diag = FitDiagnostics(
            n_samples=m, nll=None, converged=True,
            warnings=("degenerate-all-zero",) + tuple(warnings),
        )
        return ScalingFit(0.0, 0.0, cfg.sigma2_floor, 0.0, "likelihood", diag)

    lk = np.log(ks)
    A = np.array([a for b in cfg.beta_starts for a in cfg.alpha_starts], dtype=np.float64)
    B = np.array([b for b in cfg.beta_starts for _ in cfg.alpha_starts], dtype=np.float64)
    mA = np.zeros_like(A)
    vA = np.zeros_like(A)
    mB = np.zeros_like(B)
    vB = np.zeros_like(B)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, cfg.steps + 1):
        _, gA, gB, _, _ = _reduced_objective(lk, ds, A, B, cfg.sigma2_floor)
        lr_t = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - 1) / cfg.steps))
        mA = beta1 * mA + (1 - beta1) * gA
        vA = beta2 * vA + (1 - beta2) * gA**2
        mB = beta1 * mB + (1 - beta1) * gB
        vB = beta2 * vB + (1 - beta2) * gB**2
        A = A - lr_t * (mA / (1 - beta1**t)) / (np.sqrt(vA / (1 - beta2**t)) + eps)
        B = B - lr_t * (mB / (1 - beta1**t)) / (np.sqrt(vB / (1 - beta2**t)) + eps)
        A = np.clip(A, *cfg.alpha_bounds)
        B = np.clip(B, *cfg.beta_bounds)

    nll_mean, gA, gB, c_all, s2_all = _reduced_objective(lk, ds, A, B, cfg.sigma2_floor)
    best = int(np.argmin(nll_mean))
    converged = bool(max(abs(gA[best]), abs(gB[best])) < cfg.grad_tol)
    diag = FitDiagnostics(
        n_samples=m,
        nll=float(nll_mean[best]),
        converged=converged,
        warnings=tuple(warnings),
    )
    return ScalingFit(
        c=float(c_all[best]),
        alpha=float(A[best]),
        sigma2=float(s2_all[best]),
        beta=float(B[best]),
        method="likelihood",
        diagnostics=diag,
    )


# ----------------------------------------------------------------------
# variance scaling law
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceFit:
    sigma2: float
    beta: float
    r2: float
    n_used: int


def fit_variance_law(per_k_variances) -> VarianceFit:
    """Log-log OLS of per-cardinality variances: slope -beta, intercept
    log sigma^2. Non-positive variances cannot be log-transformed and are
    dropped."""
    arr = np.asarray(per_k_variances, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FittingError("pairs must be (k, variance) rows")
    keep = arr[:, 1] > 0.0
    arr = arr[keep]
    if len(arr) < 2:
        raise FittingError("fewer than 2 positive-variance pairs")
    slope, intercept, r2 = _line_fit(np.log(arr[:, 0]), np.log(arr[:, 1]))
    return VarianceFit(sigma2=math.exp(intercept), beta=-slope, r2=r2, n_used=len(arr))


# ----------------------------------------------------------------------
# fit-quality reporting
# ----------------------------------------------------------------------


def _r2(actual: np.ndarray, predicted: np.ndarray) -> float:
    sse = float(np.sum((actual - predicted) ** 2))
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0.0:
        return 1.0 if sse <= 1e-24 else 0.0
    return 1.0 - sse / sst


@dataclass(frozen=True)
class R2Report:
    per_point: list  # (point_id, r2 or None)
    per_cardinality: list  # (k, r2)
    overall: float


def r2_report(store, fits, grid) -> R2Report:
    """Fit quality against per-cardinality mean contributions.

    Per-point scores are computed in log space against each point's own fit;
    per-cardinality and overall scores compare predictions with estimated
    means in the original loss space, across points.
    """
    from .sampler import estimate_psi  # local import to avoid a cycle

    if isinstance(fits, dict):
        fit_map = dict(fits)
    else:
        fit_map = {}
        for f in fits:
            if f.point_id is None:
                raise FittingError("fits must carry point ids")
            fit_map[f.point_id] = f
    pids = sorted(fit_map)
    kvals = np.asarray(list(grid.values), dtype=np.float64)
    means = np.empty((len(pids), len(kvals)))
    for i, pid in enumerate(pids):
        for j, k in enumerate(grid.values):
            means[i, j] = estimate_psi(store, pid, k)[0]
    preds = np.empty_like(means)
    for i, pid in enumerate(pids):
        preds[i] = predict_psi(fit_map[pid], kvals)

    per_point = []
    for i, pid in enumerate(pids):
        keep = means[i] != 0.0
        if keep.sum() < 2 or fit_map[pid].c == 0.0:
            per_point.append((pid, None))
            continue
        per_point.append(
            (pid, _r2(np.log(np.abs(means[i, keep])), np.log(np.abs(preds[i, keep]))))
        )
    per_cardinality = [
        (int(k), _r2(means[:, j], preds[:, j])) for j, k in enumerate(grid.values)
    ]
    overall = _r2(means.ravel(), preds.ravel())
    return R2Report(per_point=per_point, per_cardinality=per_cardinality, overall=overall)


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------


def fit_to_dict(fit: ScalingFit) -> dict:
    d = fit.diagnostics
    return {
        "point_id": fit.point_id,
        "method": fit.method,
        "c": fit.c,
        "alpha": fit.alpha,
        "sigma2": fit.sigma2,
        "beta": fit.beta,
        "r2": d.r2,
        "nll": d.nll,
        "n_samples": d.n_samples,
        "converged": d.converged,
        "warnings": list(d.warnings),
    }


def fit_from_dict(obj: dict) -> ScalingFit:
    diag = FitDiagnostics(
        r2=obj.get("r2"),
        n_samples=obj.get("n_samples", 0),
        nll=obj.get("nll"),
        converged=obj.get("converged", True),
        warnings=tuple(obj.get("warnings", ())),
    )
    return ScalingFit(
        c=obj["c"], alpha=obj["alpha"], sigma2=obj.get("sigma2"),
        beta=obj.get("beta"), method=obj["method"], diagnostics=diag,
        point_id=obj.get("point_id"),
    )


def write_fits_jsonl(fits, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fit in fits:
            fh.write(json.dumps(fit_to_dict(fit), sort_keys=True) + "\n")


def read_fits_jsonl(path) -> list:
    fits = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                fits.append(fit_from_dict(json.loads(line)))
    return fits
