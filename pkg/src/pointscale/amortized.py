"""Amortized scaling-parameter estimator.

A two-layer network maps a data point's features to scaling parameters for
every class; only the row of the point's own label is used. Training
minimizes the same Gaussian NLL as the per-point likelihood fit over all
recorded contributions at once, sharing information across points so that
very few samples per point suffice.

Stability measures: the coefficient is predicted as a sign logit plus a
log-magnitude, the variance exponent is clamped at exp(2), gradients are
norm-clipped, and a small (alpha - 1)^2 penalty anchors the decay exponent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import Dataset
from .fitting import LOG_2PI, FitDiagnostics, ScalingFit
from .sampler import STATUS_OK, SampleStore

BETA_MAX = math.exp(2.0)

# per-class head slots
_SIGN, _LOGC, _ALPHA, _LOGS2, _BETA = range(5)


class AmortizedError(ValueError):
    """Raised for invalid training inputs."""


@dataclass(frozen=True)
class AmortizedConfig:
    width: int = 128
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    prior_weight: float = 1e-3
    grad_clip: float = 1.0
    init_alpha: float = 1.0
    init_beta: float = 1.0
    init_log_abs_c: float = math.log(0.1)  # initial |psi_100| near 1e-3
    init_log_sigma2: float = math.log(1e-4)
    seed: int = 0


@dataclass
class AmortizedNet:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    num_classes: int
    config: AmortizedConfig

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy_weights(self) -> list:
        return [p.copy() for p in self.params()]

    def set_weights(self, weights) -> None:
        self.W1, self.b1, self.W2, self.b2 = [w.copy() for w in weights]


@dataclass(frozen=True)
class TrainRun:
    train_nll: list
    val_nll: list
    best_epoch: int  # -1 when no epochs ran
    stopped_epoch: int
    val_point_ids: tuple


def init_net(input_dim: int, num_classes: int, config: AmortizedConfig) -> AmortizedNet:
    """Hidden layer gets 1/sqrt(fan_in) Gaussian weights; the output layer is
    zero so initial predictions equal the head biases (alpha = init_alpha
    for every input)."""
    gen = seeding.rng(config.seed)
    W1 = gen.standard_normal((input_dim, config.width)) / np.sqrt(input_dim)
    b1 = np.zeros(config.width)
    W2 = np.zeros((config.width, 5 * num_classes))
    b2 = np.zeros(5 * num_classes)
    for c in range(num_classes):
        b2[5 * c + _LOGC] = config.init_log_abs_c
        b2[5 * c + _ALPHA] = config.init_alpha
        b2[5 * c + _LOGS2] = config.init_log_sigma2
        b2[5 * c + _BETA] = config.init_beta
    return AmortizedNet(W1, b1, W2, b2, num_classes, config)


def _forward(net: AmortizedNet, X: np.ndarray):
    pre = X @ net.W1 + net.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ net.W2 + net.b2
    return pre, hidden, out


def _decode_rows(out: np.ndarray, y: np.ndarray):
    """Per-record head values for the true class: returns raw
    (sign_logit, log_abs_c, alpha, log_sigma2, beta_raw) columns."""
    base = 5 * y
    idx = np.arange(len(y))
    return tuple(out[idx, base + slot] for slot in range(5))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def loss_and_grads(net: AmortizedNet, X, y, ks, deltas, prior_weight: float):
    """Mean NLL + alpha prior over a batch, with gradients for every weight.

    Returns (loss, mean_nll, [dW1, db1, dW2, db2]). Manual backprop; kept
    in one place so finite-difference checks can exercise the whole path.
    """
    B = len(y)
    lk = np.log(ks)
    pre, hidden, out = _forward(net, X)
    sign_logit, log_c, alpha, log_s2, beta_raw = _decode_rows(out, y)

    sig = _sigmoid(sign_logit)
    sgn = 2.0 * sig - 1.0
    mag = np.exp(log_c)
    c = sgn * mag
    beta = np.clip(beta_raw, 0.0, BETA_MAX)
    beta_gate = (beta_raw > 0.0) & (beta_raw < BETA_MAX)

    mean_term = c * np.exp(-alpha * lk)
    resid = deltas - mean_term
    u = np.exp(np.minimum(beta * lk - log_s2, 700.0))  # overflow guard
    nll = 0.5 * LOG_2PI + 0.5 * log_s2 - 0.5 * beta * lk + 0.5 * resid**2 * u
    prior = prior_weight * (alpha - 1.0) ** 2
    loss = float(np.mean(nll + prior))
    mean_nll = float(np.mean(nll))

    # gradients w.r.t. the five raw head values, per record (mean-scaled)
    dc = -np.exp(-alpha * lk) * resid * u / B
    d_sign = dc * (2.0 * sig * (1.0 - sig) * mag)
    d_logc = dc * c
    d_alpha = (resid * u * mean_term * lk + 2.0 * prior_weight * (alpha - 1.0)) / B
    d_logs2 = (0.5 - 0.5 * resid**2 * u) / B
    d_beta = np.where(beta_gate, 0.5 * lk * (resid**2 * u - 1.0) / B, 0.0)

    dOut = np.zeros_like(out)
    base = 5 * y
    idx = np.arange(B)
    dOut[idx, base + _SIGN] = d_sign
    dOut[idx, base + _LOGC] = d_logc
    dOut[idx, base + _ALPHA] = d_alpha
    dOut[idx, base + _LOGS2] = d_logs2
    dOut[idx, base + _BETA] = d_beta

    dW2 = hidden.T @ dOut
    db2 = dOut.sum(axis=0)
    dHidden = dOut @ net.W2.T
    dPre = dHidden * (pre > 0.0)
    dW1 = X.T @ dPre
    db1 = dPre.sum(axis=0)
    return loss, mean_nll, [dW1, db1, dW2, db2]


def _batch_nll(net: AmortizedNet, X, y, ks, deltas) -> float:
    lk = np.log(ks)
    _, _, out = _forward(net, X)
    sign_logit, log_c, alpha, log_s2, beta_raw = _decode_rows(out, y)
    c = (2.0 * _sigmoid(sign_logit) - 1.0) * np.exp(log_c)
    beta = np.clip(beta_raw, 0.0, BETA_MAX)
    resid = deltas - c * np.exp(-alpha * lk)
    u = np.exp(np.minimum(beta * lk - log_s2, 700.0))
    nll = 0.5 * LOG_2PI + 0.5 * log_s2 - 0.5 * beta * lk + 0.5 * resid**2 * u
    return float(np.mean(nll))


def train_amortized(
    store: SampleStore, dataset: Dataset, config: AmortizedConfig | None = None
):
    """Fit the amortized estimator on a campaign store.

    The validation split holds out whole points (not records), so early
    stopping measures generalization to unseen examples. Returns
    (net, TrainRun); the returned weights are those of the best validation
    epoch. Deterministic given config.seed.
    """
    cfg = config or AmortizedConfig()
    if not dataset.task.is_classification:
        raise AmortizedError("amortized estimator needs a classification dataset")
    recs = store.records
    ok = recs["status"] == STATUS_OK
    if not ok.any():
        raise AmortizedError("store has no successful records")
    pid = recs["point_id"][ok].astype(np.int64)
    ks = recs["k"][ok].astype(np.float64)
    deltas = recs["delta"][ok].astype(np.float64)
    if pid.max() >= dataset.n:
        raise AmortizedError("store points exceed dataset size")
    X_all = dataset.X[pid]
    y_all = dataset.y[pid].astype(np.int64)

    points = np.unique(pid)
    split_gen = seeding.rng(seeding.mix(cfg.seed, seeding.SPLIT, 0))
    perm = split_gen.permutation(len(points))
    n_val = int(round(cfg.val_fraction * len(points)))
    if len(points) > 1:
        n_val = min(max(n_val, 1), len(points) - 1)
    else:
        n_val = 0
    val_points = set(points[perm[:n_val]].tolist())
    val_mask = np.isin(pid, list(val_points)) if val_points else np.zeros(len(pid), bool)
    tr = ~val_mask

    net = init_net(dataset.d, dataset.task.num_classes, cfg)
    m_state = [np.zeros_like(p) for p in net.params()]
    v_state = [np.zeros_like(p) for p in net.params()]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam_t = 0

    Xtr, ytr, ktr, dtr = X_all[tr], y_all[tr], ks[tr], deltas[tr]
    has_val = val_mask.any()
    Xv, yv, kv, dv = X_all[val_mask], y_all[val_mask], ks[val_mask], deltas[val_mask]

    train_curve, val_curve = [], []
    best_val = math.inf
    best_epoch = -1
    best_weights = net.copy_weights()
    stopped = 0
    n_tr = len(ytr)
    for epoch in range(cfg.max_epochs):
        order = seeding.rng(seeding.mix(cfg.seed, seeding.SPLIT, epoch + 1)).permutation(n_tr)
        epoch_loss = 0.0
        for lo in range(0, n_tr, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            loss, _, grads = loss_and_grads(
                net, Xtr[sel], ytr[sel], ktr[sel], dtr[sel], cfg.prior_weight
            )
            gnorm = math.sqrt(sum(float(np.sum(g**2)) for g in grads))
            if gnorm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / gnorm) for g in grads]
            adam_t += 1
            params = net.params()
            for i, (p, g) in enumerate(zip(params, grads)):
                m_state[i] = beta1 * m_state[i] + (1 - beta1) * g
                v_state[i] = beta2 * v_state[i] + (1 - beta2) * g**2
                mhat = m_state[i] / (1 - beta1**adam_t)
                vhat = v_state[i] / (1 - beta2**adam_t)
                p -= cfg.lr * mhat / (np.sqrt(vhat) + eps)
            epoch_loss += loss * len(sel)
        train_curve.append(epoch_loss / n_tr)
        stopped = epoch + 1
        if has_val:
            vloss = _batch_nll(net, Xv, yv, kv, dv)
            val_curve.append(vloss)
            if vloss < best_val:
                best_val = vloss
                best_epoch = epoch
                best_weights = net.copy_weights()
            elif epoch - best_epoch >= cfg.patience:
                break
        else:
            best_epoch = epoch
            best_weights = net.copy_weights()
    net.set_weights(best_weights)
    run = TrainRun(
        train_nll=train_curve,
        val_nll=val_curve,
        best_epoch=best_epoch,
        stopped_epoch=stopped,
        val_point_ids=tuple(sorted(val_points)),
    )
    return net, run


def predict_params(net: AmortizedNet, z) -> ScalingFit:
    """Decode the head row of z's class into a ScalingFit. Pure function."""
    x = np.asarray(z.x, dtype=np.float64)
    y = int(z.y)
    if not 0 <= y < net.num_classes:
        raise AmortizedError(f"class {y} out of range")
    _, _, out = _forward(net, x[None, :])
    row = out[0, 5 * y : 5 * y + 5]
    sign = 1.0 if row[_SIGN] >= 0.0 else -1.0
    c = sign * math.exp(row[_LOGC])
    alpha = float(np.clip(row[_ALPHA], 0.0, 10.0))
    sigma2 = math.exp(row[_LOGS2])
    beta = float(np.clip(row[_BETA], 0.0, BETA_MAX))
    diag = FitDiagnostics(n_samples=0, converged=True)
    return ScalingFit(
        c=c, alpha=alpha, sigma2=sigma2, beta=beta, method="amortized",
        diagnostics=diag, point_id=getattr(z, "id", None),
    )


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

NET_MAGIC = b"PSAN"
NET_VERSION = 1


def save_net(net: AmortizedNet, path) -> None:
    header = {
        "input_dim": net.input_dim,
        "width": net.W1.shape[1],
        "num_classes": net.num_classes,
        "config": {
            k: getattr(net.config, k)
            for k in AmortizedConfig.__dataclass_fields__
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(np.uint32(NET_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_net(path) -> AmortizedNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != NET_MAGIC:
        raise AmortizedError(f"{path}: not an amortized-net file")
    version = int(np.frombuffer(raw[4:8], "<u4")[0])
    if version != NET_VERSION:
        raise AmortizedError(f"unsupported net version {version}")
    hlen = int(np.frombuffer(raw[8:12], "<u4")[0])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    cfg = AmortizedConfig(**header["config"])
    d, width, C = header["input_dim"], header["width"], header["num_classes"]
    shapes = [(d, width), (width,), (width, 5 * C), (5 * C,)]
    offset = 12 + hlen
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(raw, "<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset += count * 8
    return AmortizedNet(*arrays, num_classes=C, config=cfg)
