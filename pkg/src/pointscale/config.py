"""Strict JSON run configuration.

A config is one JSON document with a ``version`` field. Unknown keys are
errors: silent config drift corrupts long campaigns. Section builders turn
validated sections into library objects.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import data as data_mod
from .models import MODEL_KINDS, ModelSpec
from .sampler import METRICS, CardinalityGrid

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _check_keys(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"{path}.{key}: required")
    return section[key]


def _number(v, path: str, lo=None, hi=None, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    if integer and not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}: must be <= {hi}")
    return v


_DATASET_KEYS = {
    "synthetic_classification": {"kind", "n", "d", "separation", "seed"},
    "synthetic_linear": {"kind", "n", "d", "sigma_noise", "covariance", "beta_star", "seed"},
    "csv": {"kind", "path", "label", "task", "class_map"},
}


def _validate_dataset(section, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = _require(section, "kind", path)
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"{path}.kind: unknown dataset kind {kind!r}")
    _check_keys(section, _DATASET_KEYS[kind], path)
    if kind == "synthetic_classification":
        _number(_require(section, "n", path), f"{path}.n", lo=2, integer=True)
        _number(_require(section, "d", path), f"{path}.d", lo=1, integer=True)
        _number(_require(section, "separation", path), f"{path}.separation", lo=0)
        _number(section.get("seed", 0), f"{path}.seed", integer=True)
    elif kind == "synthetic_linear":
        _number(_require(section, "n", path), f"{path}.n", lo=1, integer=True)
        _number(_require(section, "d", path), f"{path}.d", lo=1, integer=True)
        _number(_require(section, "sigma_noise", path), f"{path}.sigma_noise", lo=0)
        _number(section.get("seed", 0), f"{path}.seed", integer=True)
    else:
        _require(section, "path", path)
        _require(section, "label", path)
        task = _require(section, "task", path)
        if task not in ("classification", "regression"):
            raise ConfigError(f"{path}.task: unknown task {task!r}")


def build_dataset(section: dict, role: str) -> data_mod.Dataset:
    kind = section["kind"]
    if kind == "synthetic_classification":
        return data_mod.synth_classification(
            section["n"], section["d"], section["separation"],
            seed=section.get("seed", 0), role=role,
        )
    if kind == "synthetic_linear":
        return data_mod.synth_linear(
            section["n"], section["d"], section["sigma_noise"],
            covariance_spec=section.get("covariance", "identity"),
            beta_star_spec=section.get("beta_star", "ones"),
            seed=section.get("seed", 0), role=role,
        )
    schema = data_mod.CsvSchema(
        label=section["label"], task=section["task"],
        class_map=section.get("class_map"), role=role,
    )
    return data_mod.load_csv(section["path"], schema)


def _validate_grid(section, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = section.get("kind", "log_spaced")
    if kind == "log_spaced":
        _check_keys(section, {"kind", "count", "k_min", "k_max", "lower_bound"}, path)
        _number(_require(section, "count", path), f"{path}.count", lo=1, integer=True)
        k_min = _number(_require(section, "k_min", path), f"{path}.k_min", lo=1, integer=True)
        k_max = _number(_require(section, "k_max", path), f"{path}.k_max", lo=1, integer=True)
        if k_min > k_max:
            raise ConfigError(f"{path}.k_min: must not exceed k_max")
    elif kind == "explicit":
        _check_keys(section, {"kind", "values", "lower_bound"}, path)
        values = _require(section, "values", path)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{path}.values: expected a nonempty list")
    else:
        raise ConfigError(f"{path}.kind: unknown grid kind {kind!r}")


def build_grid(section: dict) -> CardinalityGrid:
    lower = section.get("lower_bound", 100)
    if section.get("kind", "log_spaced") == "explicit":
        return CardinalityGrid(tuple(section["values"]), lower_bound=lower)
    return CardinalityGrid.log_spaced(
        section["count"], section["k_min"], section["k_max"], lower_bound=lower
    )


def _validate_model(section, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    _check_keys(section, {"kind", "hyperparams", "seed"}, path)
    kind = _require(section, "kind", path)
    if kind not in MODEL_KINDS:
        raise ConfigError(f"{path}.kind: unknown model kind {kind!r}")
    try:
        ModelSpec(kind, dict(section.get("hyperparams", {})), section.get("seed", 0))
    except ValueError as exc:
        raise ConfigError(f"{path}.hyperparams: {exc}") from None


def build_model_spec(section: dict) -> ModelSpec:
    return ModelSpec(
        section["kind"], dict(section.get("hyperparams", {})), section.get("seed", 0)
    )


_TOP_KEYS = {
    "version", "master_seed", "workers", "pool", "test", "candidates", "model",
    "grid", "sampling", "fit", "amortize", "valuation", "selection",
    "point_addition", "verify",
}

_SAMPLING_KEYS = {"mode", "m", "balanced", "metric", "eval_points"}
_FIT_KEYS = {"methods", "min_samples"}
_AMORTIZE_KEYS = {
    "width", "lr", "batch_size", "max_epochs", "patience", "val_fraction",
    "prior_weight", "grad_clip", "seed",
}
_VALUATION_KEYS = {"k_min", "k_max", "methods"}
_SELECTION_KEYS = {"k_targets", "m"}
_POINT_ADDITION_KEYS = {"preceding_sizes", "n_added", "trials", "balanced"}
_VERIFY_KEYS = {"linear", "mestimator", "alpha_rate"}
_VERIFY_LINEAR_KEYS = {"d", "k", "sigma2", "epsilon", "n_draws", "seed", "leading_rtol"}
_VERIFY_MEST_KEYS = {
    "d", "separation", "k", "n_samples", "points", "pool_n", "validation_n",
    "reference_n", "seed", "rel_slack",
}
_VERIFY_ALPHA_KEYS = {"expected", "tolerance"}


def validate_config(cfg: dict) -> dict:
    """Validate a parsed config document; returns it unchanged on success."""
    _check_keys(cfg, _TOP_KEYS, "config")
    version = _require(cfg, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config.version: expected {CONFIG_VERSION}, got {version!r}")
    _number(_require(cfg, "master_seed", "config"), "config.master_seed", integer=True)
    if "workers" in cfg:
        _number(cfg["workers"], "config.workers", lo=1, integer=True)
    _validate_dataset(_require(cfg, "pool", "config"), "config.pool")
    for opt in ("test", "candidates"):
        if opt in cfg:
            _validate_dataset(cfg[opt], f"config.{opt}")
    _validate_model(_require(cfg, "model", "config"), "config.model")
    if "grid" in cfg:
        _validate_grid(cfg["grid"], "config.grid")
    if "sampling" in cfg:
        s = cfg["sampling"]
        _check_keys(s, _SAMPLING_KEYS, "config.sampling")
        mode = _require(s, "mode", "config.sampling")
        if mode not in ("per_cardinality", "uniform"):
            raise ConfigError(f"config.sampling.mode: unknown mode {mode!r}")
        _number(_require(s, "m", "config.sampling"), "config.sampling.m", lo=1, integer=True)
        metric = s.get("metric", "test_loss")
        if metric not in METRICS:
            raise ConfigError(f"config.sampling.metric: unknown metric {metric!r}")
    if "fit" in cfg:
        _check_keys(cfg["fit"], _FIT_KEYS, "config.fit")
        for method in cfg["fit"].get("methods", []):
            if method not in ("loglinear", "likelihood"):
                raise ConfigError(f"config.fit.methods: unknown method {method!r}")
    if "amortize" in cfg:
        _check_keys(cfg["amortize"], _AMORTIZE_KEYS, "config.amortize")
    if "valuation" in cfg:
        v = cfg["valuation"]
        _check_keys(v, _VALUATION_KEYS, "config.valuation")
        k_min = _number(_require(v, "k_min", "config.valuation"),
                        "config.valuation.k_min", lo=1, integer=True)
        k_max = _number(_require(v, "k_max", "config.valuation"),
                        "config.valuation.k_max", lo=1, integer=True)
        if k_min > k_max:
            raise ConfigError("config.valuation.k_min: must not exceed k_max")
    if "selection" in cfg:
        s = cfg["selection"]
        _check_keys(s, _SELECTION_KEYS, "config.selection")
        targets = _require(s, "k_targets", "config.selection")
        if not isinstance(targets, list) or not targets:
            raise ConfigError("config.selection.k_targets: expected a nonempty list")
        _number(_require(s, "m", "config.selection"), "config.selection.m", lo=1, integer=True)
    if "point_addition" in cfg:
        p = cfg["point_addition"]
        _check_keys(p, _POINT_ADDITION_KEYS, "config.point_addition")
        sizes = _require(p, "preceding_sizes", "config.point_addition")
        if not isinstance(sizes, list) or not sizes:
            raise ConfigError("config.point_addition.preceding_sizes: expected a nonempty list")
        _number(_require(p, "n_added", "config.point_addition"),
                "config.point_addition.n_added", lo=0, integer=True)
        _number(_require(p, "trials", "config.point_addition"),
                "config.point_addition.trials", lo=1, integer=True)
    if "verify" in cfg:
        v = cfg["verify"]
        _check_keys(v, _VERIFY_KEYS, "config.verify")
        if "linear" in v:
            _check_keys(v["linear"], _VERIFY_LINEAR_KEYS, "config.verify.linear")
        if "mestimator" in v:
            _check_keys(v["mestimator"], _VERIFY_MEST_KEYS, "config.verify.mestimator")
        if "alpha_rate" in v:
            _check_keys(v["alpha_rate"], _VERIFY_ALPHA_KEYS, "config.verify.alpha_rate")
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return validate_config(cfg)
