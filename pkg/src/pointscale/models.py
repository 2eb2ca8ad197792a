"""Trainers and loss evaluators for the model classes under study.

All trainers are pure functions of (spec, data): repeated calls return
bit-identical parameters. Reductions run in a fixed sequential order so
sampled loss differences are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import DatasetView, Task

MODEL_KINDS = ("linear_regression", "logistic_regression", "mlp")

PROB_CLAMP = 1e-12  # cross-entropy probability clamp

_DEFAULT_HYPERPARAMS = {
    "linear_regression": {"fit_intercept": False, "ridge_fallback": True},
    "logistic_regression": {
        "l2": 1e-4,
        "tol": 1e-7,
        "max_iter": 200,
        "fit_intercept": True,
    },
    "mlp": {"width": 32, "weight_decay": 0.01, "lr": 0.01, "epochs": 200},
}


class TrainingError(RuntimeError):
    """Raised when a training run cannot produce a valid model."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind: {self.kind!r}")
        defaults = _DEFAULT_HYPERPARAMS[self.kind]
        unknown = set(self.hyperparams) - set(defaults)
        if unknown:
            raise ValueError(f"unknown hyperparams for {self.kind}: {sorted(unknown)}")
        merged = {**defaults, **self.hyperparams}
        object.__setattr__(self, "hyperparams", merged)

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.kind, dict(self.hyperparams), seed)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hyperparams": dict(self.hyperparams),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], dict(d.get("hyperparams", {})), int(d.get("seed", 0)))


@dataclass(frozen=True)
class TrainedModel:
    kind: str
    task: Task
    params: dict
    training_size: int


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ----------------------------------------------------------------------
# linear regression
# ----------------------------------------------------------------------


def _fit_linear(view: DatasetView, hp: dict) -> dict:
    X, y = view.X, view.y
    if hp["fit_intercept"]:
        Xa = np.empty((X.shape[0], X.shape[1] + 1))
        Xa[:, :-1] = X
        Xa[:, -1] = 1.0
    else:
        Xa = X
    G = Xa.T @ Xa
    b = Xa.T @ y
    ridge_used = False
    try:
        theta = np.linalg.solve(G, b)
        if not np.isfinite(theta).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        if not hp["ridge_fallback"]:
            raise TrainingError("singular normal equations (ridge fallback disabled)")
        lam = 1e-8 * np.trace(G) / Xa.shape[1]
        theta = np.linalg.solve(G + lam * np.eye(Xa.shape[1]), b)
        ridge_used = True
    if hp["fit_intercept"]:
        return {"w": theta[:-1], "b": float(theta[-1]), "ridge_used": ridge_used}
    return {"w": theta, "b": 0.0, "ridge_used": ridge_used}


# ----------------------------------------------------------------------
# logistic regression (full-batch Newton with backtracking line search)
# ----------------------------------------------------------------------


def _logistic_objective(Xa, y, theta, reg) -> float:
    s = Xa @ theta
    # mean of log(1 + exp(s)) - y*s, computed stably
    return float(np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * np.sum(reg * theta**2))


def _fit_logistic_binary(Xa, y, reg, tol, max_iter, theta0=None):
    n, p = Xa.shape
    theta = np.zeros(p) if theta0 is None else theta0.copy()
    for _ in range(max_iter):
        s = Xa @ theta
        prob = _sigmoid(s)
        g = Xa.T @ (prob - y) / n + reg * theta
        if np.max(np.abs(g)) <= tol:
            return theta, True
        w = prob * (1.0 - prob)
        H = (Xa * w[:, None]).T @ Xa / n + np.diag(reg)
        try:
            step = np.linalg.solve(H, g)
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = g  # gradient fallback for ill-conditioned Hessians
        f0 = _logistic_objective(Xa, y, theta, reg)
        if not np.isfinite(f0):
            raise TrainingError("non-finite logistic loss")
        g_dot = float(g @ step)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            if _logistic_objective(Xa, y, cand, reg) <= f0 - 1e-4 * t * g_dot:
                break
            t *= 0.5
        theta = theta - t * step
    # final gradient check
    prob = _sigmoid(Xa @ theta)
    g = Xa.T @ (prob - y) / n + reg * theta
    return theta, bool(np.max(np.abs(g)) <= tol)


def _fit_logistic_multiclass(Xa, y, C, reg, tol, max_iter):
    """Softmax regression with class 0 as the reference (logit fixed at 0)."""
    n, p = Xa.shape
    Theta = np.zeros((p, C - 1))
    regm = np.tile(reg[:, None], (1, C - 1))
    onehot = np.zeros((n, C - 1))
    for c in range(1, C):
        onehot[y == c, c - 1] = 1.0

    def objective(Th):
        logits = np.concatenate([np.zeros((n, 1)), Xa @ Th], axis=1)
        lse = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
        picked = logits[np.arange(n), y]
        return float(np.mean(lse - picked) + 0.5 * np.sum(regm * Th**2))

    for _ in range(max_iter):
        logits = np.concatenate([np.zeros((n, 1)), Xa @ Theta], axis=1)
        P = _softmax(logits)[:, 1:]
        G = Xa.T @ (P - onehot) / n + regm * Theta
        if np.max(np.abs(G)) <= tol:
            return Theta, True
        # Hessian over flattened (p*(C-1)) parameters
        m = p * (C - 1)
        H = np.zeros((m, m))
        for a in range(C - 1):
            for b in range(a, C - 1):
                w = P[:, a] * ((1.0 if a == b else 0.0) - P[:, b])
                blk = (Xa * w[:, None]).T @ Xa / n
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                if a != b:
                    H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk
        H[np.arange(m), np.arange(m)] += regm.T.ravel()
        gflat = G.T.ravel()
        try:
            step = np.linalg.solve(H, gflat).reshape(C - 1, p).T
            if not np.isfinite(step).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = G
        f0 = objective(Theta)
        if not np.isfinite(f0):
            raise TrainingError("non-finite logistic loss")
        g_dot = float(np.sum(G * step))
        t = 1.0
        while t > 1e-10:
            cand = Theta - t * step
            if objective(cand) <= f0 - 1e-4 * t * g_dot:
                break
            t *= 0.5
        Theta = Theta - t * step
    logits = np.concatenate([np.zeros((n, 1)), Xa @ Theta], axis=1)
    P = _softmax(logits)[:, 1:]
    G = Xa.T @ (P - onehot) / n + regm * Theta
    return Theta, bool(np.max(np.abs(G)) <= tol)


def _fit_logistic(view: DatasetView, hp: dict, init: dict | None) -> dict:
    X, y = view.X, view.y
    n, d = X.shape
    intercept = hp["fit_intercept"]
    p = d + (1 if intercept else 0)
    if intercept:
        Xa = np.empty((n, p))
        Xa[:, :d] = X
        Xa[:, d] = 1.0
    else:
        Xa = X
    reg = np.full(p, hp["l2"])
    if intercept:
        reg[d] = 0.0  # intercept unregularized
    C = view.task.num_classes
    if C == 2:
        theta0 = None
        if init is not None:
            theta0 = np.concatenate([init["w"], [init["b"]]]) if intercept else init["w"].copy()
        theta, converged = _fit_logistic_binary(
            Xa, y.astype(np.float64), reg, hp["tol"], hp["max_iter"], theta0
        )
        w = theta[:d]
        b = float(theta[d]) if intercept else 0.0
        return {"w": w, "b": b, "converged": converged}
    Theta, converged = _fit_logistic_multiclass(Xa, y, C, reg, hp["tol"], hp["max_iter"])
    W = Theta[:d]
    b = Theta[d] if intercept else np.zeros(C - 1)
    return {"W": W, "b": np.asarray(b, dtype=np.float64), "converged": converged}


# ----------------------------------------------------------------------
# small MLP, manual backprop, full-batch Adam
# ----------------------------------------------------------------------


def _fit_mlp(view: DatasetView, hp: dict, seed: int) -> dict:
    X, y, task = view.X, view.y, view.task
    n, d = X.shape
    width = hp["width"]
    wd = hp["weight_decay"]
    lr = hp["lr"]
    gen = seeding.rng(seed)
    C = task.num_classes if task.is_classification else 1
    W1 = gen.standard_normal((d, width)) / np.sqrt(d)
    b1 = np.zeros(width)
    W2 = gen.standard_normal((width, C)) / np.sqrt(width)
    b2 = np.zeros(C)
    if task.is_classification:
        onehot = np.zeros((n, C))
        onehot[np.arange(n), y] = 1.0

    params = [W1, b1, W2, b2]
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    for step in range(1, hp["epochs"] + 1):
        H = X @ W1 + b1
        A = np.maximum(H, 0.0)
        out = A @ W2 + b2
        if task.is_classification:
            P = _softmax(out)
            loss = -np.mean(
                np.log(np.clip(P[np.arange(n), y], PROB_CLAMP, None))
            )
            delta = (P - onehot) / n
        else:
            err = out[:, 0] - y
            loss = np.mean(err**2)
            delta = (2.0 * err / n)[:, None]
        loss += 0.5 * wd * (np.sum(W1**2) + np.sum(W2**2))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite MLP loss at step {step}")
        dW2 = A.T @ delta + wd * W2
        db2 = delta.sum(axis=0)
        dA = delta @ W2.T
        dH = dA * (H > 0.0)
        dW1 = X.T @ dH + wd * W1
        db1 = dH.sum(axis=0)
        grads = [dW1, db1, dW2, db2]
        for i, (p, g) in enumerate(zip(params, grads)):
            m_state[i] = beta1 * m_state[i] + (1.0 - beta1) * g
            v_state[i] = beta2 * v_state[i] + (1.0 - beta2) * g**2
            mhat = m_state[i] / (1.0 - beta1**step)
            vhat = v_state[i] / (1.0 - beta2**step)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
    return {"W1": W1, "b1": b1, "W2": W2, "b2": b2}


# ----------------------------------------------------------------------
# public API
# ----------------------------------------------------------------------


def train(spec: ModelSpec, view: DatasetView, init: TrainedModel | None = None) -> TrainedModel:
    """Train ``spec.kind`` on the view. Deterministic given (spec, view).

    ``init`` optionally warm-starts the logistic solver; the minimizer is
    unique, so warm starts change only the iteration count.
    """
    if view.n == 0:
        raise TrainingError("empty training set")
    hp = dict(spec.hyperparams)
    if spec.kind == "linear_regression":
        params = _fit_linear(view, hp)
    elif spec.kind == "logistic_regression":
        if not view.task.is_classification:
            raise TrainingError("logistic regression needs a classification task")
        init_params = init.params if init is not None and init.kind == spec.kind else None
        params = _fit_logistic(view, hp, init_params)
    else:
        params = _fit_mlp(view, hp, spec.seed)
    for v in params.values():
        if isinstance(v, np.ndarray) and not np.isfinite(v).all():
            raise TrainingError("non-finite parameters after training")
    return TrainedModel(spec.kind, view.task, params, view.n)


def predict_proba(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Class probabilities, shape (n, num_classes)."""
    task = model.task
    if not task.is_classification:
        raise ValueError("predict_proba on a regression model")
    if model.kind == "logistic_regression":
        if "w" in model.params:  # binary
            p1 = _sigmoid(X @ model.params["w"] + model.params["b"])
            return np.column_stack([1.0 - p1, p1])
        logits = np.concatenate(
            [np.zeros((X.shape[0], 1)), X @ model.params["W"] + model.params["b"]],
            axis=1,
        )
        return _softmax(logits)
    if model.kind == "mlp":
        A = np.maximum(X @ model.params["W1"] + model.params["b1"], 0.0)
        return _softmax(A @ model.params["W2"] + model.params["b2"])
    raise ValueError(f"{model.kind} is not a classifier")


def predict_regression(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    if model.task.is_classification:
        raise ValueError("predict_regression on a classification model")
    if model.kind == "linear_regression":
        return X @ model.params["w"] + model.params["b"]
    if model.kind == "mlp":
        A = np.maximum(X @ model.params["W1"] + model.params["b1"], 0.0)
        return (A @ model.params["W2"] + model.params["b2"])[:, 0]
    raise ValueError(f"{model.kind} is not a regressor")


def eval_loss(model: TrainedModel, view: DatasetView) -> float:
    """Mean cross-entropy (classification) or mean squared error (regression).

    Predicted probabilities are clamped to [1e-12, 1 - 1e-12] so a single
    overconfident model cannot produce an infinite loss difference.
    """
    if view.n == 0:
        raise ValueError("empty evaluation set")
    if view.task != model.task:
        raise ValueError("task mismatch between model and evaluation set")
    if view.task.is_classification:
        P = predict_proba(model, view.X)
        picked = np.clip(P[np.arange(view.n), view.y], PROB_CLAMP, 1.0 - PROB_CLAMP)
        return float(-np.mean(np.log(picked)))
    pred = predict_regression(model, view.X)
    return float(np.mean((pred - view.y) ** 2))


def eval_accuracy(model: TrainedModel, view: DatasetView) -> float:
    """Fraction of correct argmax predictions; ties go to the lower class."""
    if not view.task.is_classification:
        raise ValueError("accuracy needs a classification task")
    P = predict_proba(model, view.X)
    pred = np.argmax(P, axis=1)  # argmax returns the first (lowest) maximizer
    return float(np.mean(pred == view.y))


def decision_boundary_distance(model: TrainedModel, x: np.ndarray) -> float:
    """Signed distance (w.x + b) / ||w|| for a binary logistic model."""
    if model.kind != "logistic_regression" or "w" not in model.params:
        raise ValueError("boundary distance requires a binary logistic model")
    w = model.params["w"]
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("zero weight vector has no decision boundary")
    return float((x @ w + model.params["b"]) / norm)


def population_mse(model: TrainedModel, beta_star, Sigma, sigma2_noise: float) -> float:
    """Closed-form population MSE for a linear model under x ~ N(0, Sigma):

        sigma^2 + (w - beta*)' Sigma (w - beta*) + b^2
    """
    if model.kind != "linear_regression":
        raise ValueError("population MSE applies to linear regression")
    beta_star = np.asarray(beta_star, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    diff = model.params["w"] - beta_star
    return float(sigma2_noise + diff @ Sigma @ diff + model.params["b"] ** 2)
