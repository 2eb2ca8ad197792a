"""Batch command-line interface.

Subcommands cover the full pipeline: ``sample`` runs a contribution
campaign, ``fit``/``amortize`` estimate scaling parameters, ``value`` /
``select`` / ``add-eval`` apply them, ``verify`` runs the numeric theory
checks, and ``report`` renders SVG diagnostics. Exit codes: 0 success,
2 config error, 3 input/IO error, 4 failed verification.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import amortized as amortized_mod
from . import config as config_mod
from . import fitting, models, sampler, svg, theory, valuation
from .config import ConfigError
from .data import Dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4


class InputError(RuntimeError):
    """Missing or inconsistent input artifacts."""


def _load_config(args) -> dict:
    cfg = config_mod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["master_seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_pool_test(cfg):
    pool = config_mod.build_dataset(cfg["pool"], role="train-pool")
    test = None
    if "test" in cfg:
        test = config_mod.build_dataset(cfg["test"], role="test")
    return pool, test


def _eval_point_ids(cfg, pool: Dataset, candidates: Dataset | None):
    sampling = cfg.get("sampling", {})
    count = sampling.get("eval_points")
    source = candidates if candidates is not None else pool
    if count is None:
        count = source.n
    if count > source.n:
        raise ConfigError("config.sampling.eval_points: exceeds dataset size")
    return list(range(count))


def _load_store(args) -> sampler.SampleStore:
    path = Path(args.store)
    if not path.exists():
        raise InputError(f"store not found: {path}")
    return sampler.SampleStore.load(path)


def _check_store_matches(cfg, store, pool):
    meta = store.metadata
    if meta.get("pool_fingerprint") != pool.fingerprint():
        raise InputError("store does not match the configured pool dataset")
    if meta.get("model_spec") != config_mod.build_model_spec(cfg["model"]).to_dict():
        raise InputError("store does not match the configured model spec")


def _store_grid(store) -> sampler.CardinalityGrid:
    meta = store.metadata
    return sampler.CardinalityGrid(
        tuple(meta["grid"]), lower_bound=meta.get("grid_lower_bound", 100)
    )


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    for key in ("grid", "sampling"):
        if key not in cfg:
            raise ConfigError(f"config.{key}: required for sampling")
    out = _out_dir(args)
    pool, test = _build_pool_test(cfg)
    candidates = None
    if "candidates" in cfg:
        candidates = config_mod.build_dataset(cfg["candidates"], role="candidate-pool")
    grid = config_mod.build_grid(cfg["grid"])
    spec = config_mod.build_model_spec(cfg["model"])
    sampling = cfg["sampling"]
    points = _eval_point_ids(cfg, pool, candidates)
    store = sampler.run_campaign(
        pool,
        test,
        points,
        grid,
        sampling["mode"],
        sampling["m"],
        spec,
        cfg["master_seed"],
        workers=cfg.get("workers", 1),
        balanced=sampling.get("balanced"),
        metric=sampling.get("metric", "test_loss"),
        eval_dataset=candidates,
    )
    store.save(out / "store.bin")
    store.to_csv(out / "store.csv")
    (out / "campaign.json").write_text(json.dumps(store.metadata, indent=2, sort_keys=True))
    print(
        f"sampled {len(store)} records for {len(points)} points "
        f"({store.failure_count()} failures) -> {out / 'store.bin'}"
    )
    return EXIT_OK


def _loglinear_fits(store, grid):
    fits = []
    for pid in store.point_ids():
        pairs = []
        for k in grid.values:
            deltas = store.deltas(int(pid), int(k))
            if len(deltas):
                pairs.append((float(k), float(np.mean(deltas))))
        try:
            fits.append(fitting.fit_loglinear(pairs).to_scaling_fit(int(pid)))
        except fitting.FittingError:
            continue
    return fits


def _likelihood_fits(store, min_samples=20):
    cfg = fitting.LikelihoodConfig(min_samples=min_samples)
    fits = []
    for pid in store.point_ids():
        samples = store.samples_for(int(pid))
        try:
            fit = fitting.fit_likelihood(samples, cfg)
        except fitting.FittingError:
            continue
        fits.append(
            fitting.ScalingFit(
                c=fit.c, alpha=fit.alpha, sigma2=fit.sigma2, beta=fit.beta,
                method=fit.method, diagnostics=fit.diagnostics, point_id=int(pid),
            )
        )
    return fits


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    pool, _ = _build_pool_test(cfg)
    store = _load_store(args)
    if store.metadata.get("eval_fingerprint", "pool") == "pool":
        _check_store_matches(cfg, store, pool)
    grid = _store_grid(store)
    methods = cfg.get("fit", {}).get("methods", ["loglinear"])
    min_samples = cfg.get("fit", {}).get("min_samples", 20)
    summary = {"methods": {}}
    for method in methods:
        if method == "loglinear":
            fits = _loglinear_fits(store, grid)
        else:
            fits = _likelihood_fits(store, min_samples)
        if not fits:
            print(f"warning: no {method} fits could be produced", file=sys.stderr)
            continue
        fitting.write_fits_jsonl(fits, out / f"fits_{method}.jsonl")
        entry = {"n_fits": len(fits)}
        n_warn = sum(1 for f in fits if f.diagnostics.warnings)
        if n_warn:
            entry["n_warned"] = n_warn
            print(f"warning: {n_warn} {method} fits carry warnings", file=sys.stderr)
        if store.metadata.get("mode") == "per_cardinality":
            report = fitting.r2_report(store, fits, grid)
            entry["overall_r2"] = report.overall
            entry["per_cardinality_r2"] = report.per_cardinality
            scores = [r2 for _, r2 in report.per_point if r2 is not None]
            if scores:
                entry["per_point_r2_median"] = float(np.median(scores))
                entry["frac_r2_ge_0.9"] = float(np.mean(np.asarray(scores) >= 0.9))
            with open(out / f"r2_per_point_{method}.csv", "w", encoding="utf-8") as fh:
                fh.write("point_id,r2\n")
                for pid, r2 in report.per_point:
                    fh.write(f"{pid},{'' if r2 is None else repr(r2)}\n")
        summary["methods"][method] = entry
        print(f"{method}: {len(fits)} fits -> {out / f'fits_{method}.jsonl'}")
    (out / "fit_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_amortize(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    pool, _ = _build_pool_test(cfg)
    store = _load_store(args)
    source = pool
    if store.metadata.get("eval_fingerprint", "pool") != "pool":
        if "candidates" not in cfg:
            raise InputError("store was sampled on candidates; config.candidates required")
        source = config_mod.build_dataset(cfg["candidates"], role="candidate-pool")
    amort_cfg = amortized_mod.AmortizedConfig(**cfg.get("amortize", {}))
    net, run = amortized_mod.train_amortized(store, source, amort_cfg)
    amortized_mod.save_net(net, out / "amortized.bin")
    fits = [
        amortized_mod.predict_params(net, source.point(int(pid)))
        for pid in store.point_ids()
    ]
    fitting.write_fits_jsonl(fits, out / "fits_amortized.jsonl")
    (out / "train_run.json").write_text(
        json.dumps(
            {
                "train_nll": run.train_nll,
                "val_nll": run.val_nll,
                "best_epoch": run.best_epoch,
                "stopped_epoch": run.stopped_epoch,
                "val_point_ids": list(run.val_point_ids),
            },
            indent=2,
        )
    )
    print(f"trained amortized net ({run.stopped_epoch} epochs) -> {out / 'amortized.bin'}")
    return EXIT_OK


def cmd_value(args) -> int:
    cfg = _load_config(args)
    if "valuation" not in cfg:
        raise ConfigError("config.valuation: required for value command")
    out = _out_dir(args)
    vcfg = cfg["valuation"]
    k_min, k_max = vcfg["k_min"], vcfg["k_max"]
    methods = vcfg.get("methods", ["monte_carlo"])
    score_sets = {}
    if "monte_carlo" in methods:
        store = _load_store(args)
        scores = [
            valuation.shapley_monte_carlo(store, int(pid), k_min, k_max)
            for pid in store.point_ids()
        ]
        score_sets["monte_carlo"] = scores
    scaling_methods = [m for m in methods if m != "monte_carlo"]
    if scaling_methods:
        if not args.fits:
            raise InputError("--fits required for scaling-based valuation")
        fits = fitting.read_fits_jsonl(args.fits)
        by_method = {}
        for f in fits:
            by_method.setdefault(f.method, []).append(f)
        for method in scaling_methods:
            if method not in by_method:
                raise InputError(f"fits file has no {method!r} fits")
            score_sets[method] = [
                valuation.shapley_from_scaling(f, k_min, k_max)
                for f in by_method[method]
            ]
    for method, scores in score_sets.items():
        valuation.write_scores_csv(scores, out / f"valuation_{method}.csv")
        valuation.write_scores_json(scores, out / f"valuation_{method}.json")
        print(f"{method}: {len(scores)} scores -> {out / f'valuation_{method}.csv'}")
    correlations = {}
    names = sorted(score_sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pa = {s.point_id: s.psi for s in score_sets[a]}
            pb = {s.point_id: s.psi for s in score_sets[b]}
            common = sorted(set(pa) & set(pb))
            if len(common) >= 2:
                va = np.asarray([pa[p] for p in common])
                vb = np.asarray([pb[p] for p in common])
                correlations[f"{a}/{b}"] = valuation._pearson(va, vb)
    (out / "valuation_correlations.json").write_text(
        json.dumps(correlations, indent=2, sort_keys=True)
    )
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _load_config(args)
    if "selection" not in cfg:
        raise ConfigError("config.selection: required for select command")
    out = _out_dir(args)
    if not args.fits:
        raise InputError("--fits required for selection")
    fits = fitting.read_fits_jsonl(args.fits)
    scfg = cfg["selection"]
    selections = {}
    for k_target in scfg["k_targets"]:
        ids = valuation.select_points(fits, k_target, scfg["m"])
        selections[k_target] = ids
        with open(out / f"selection_k{k_target}.csv", "w", encoding="utf-8") as fh:
            fh.write("rank,point_id,predicted_psi\n")
            fit_map = {f.point_id: f for f in fits}
            for rank, pid in enumerate(ids):
                psi = fitting.predict_psi(fit_map[pid], k_target)
                fh.write(f"{rank},{pid},{psi!r}\n")
        print(f"k={k_target}: selected {len(ids)} points")
    overlap = {}
    targets = list(selections)
    for i, a in enumerate(targets):
        for b in targets[i + 1 :]:
            overlap[f"{a}/{b}"] = len(set(selections[a]) & set(selections[b]))
    (out / "selection_overlap.json").write_text(json.dumps(overlap, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_add_eval(args) -> int:
    cfg = _load_config(args)
    for key in ("point_addition", "candidates", "test"):
        if key not in cfg:
            raise ConfigError(f"config.{key}: required for add-eval command")
    out = _out_dir(args)
    pool, test = _build_pool_test(cfg)
    candidates = config_mod.build_dataset(cfg["candidates"], role="candidate-pool")
    spec = config_mod.build_model_spec(cfg["model"])
    pcfg = cfg["point_addition"]
    n_added = pcfg["n_added"]
    trials = pcfg["trials"]
    balanced = pcfg.get("balanced", True)
    if not args.fits:
        raise InputError("--fits required for add-eval")
    fits = fitting.read_fits_jsonl(args.fits)
    table = {}
    for size in pcfg["preceding_sizes"]:
        row = {}
        selections = {"random": None}
        for k_target in pcfg["preceding_sizes"]:
            selections[f"scaling_{k_target}"] = valuation.select_points(
                fits, k_target, n_added
            )
        rng = np.random.default_rng(cfg["master_seed"])
        selections["random"] = sorted(
            int(i) for i in rng.choice(candidates.n, size=n_added, replace=False)
        )
        for name, ids in selections.items():
            result = valuation.point_addition_eval(
                pool, test, candidates, ids, size, trials, spec,
                cfg["master_seed"], balanced=balanced,
            )
            row[name] = {
                "mean_improvement": result.mean_improvement,
                "std_improvement": result.std_improvement,
                "baseline_accuracy": result.baseline_accuracy,
                "n_trials": result.n_trials,
                "n_failed": result.n_failed,
            }
        table[str(size)] = row
        print(f"preceding size {size}: evaluated {sorted(selections)}")
    (out / "point_addition.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    vcfg = cfg.get("verify", {})
    if args.target == "linear":
        report = theory.verify_linear_theory(**vcfg.get("linear", {}))
        path = out / "verify_linear.json"
    elif args.target == "mestimator":
        report = theory.verify_mestimator_theory(
            workers=cfg.get("workers", 1), **vcfg.get("mestimator", {})
        )
        path = out / "verify_mestimator.json"
    else:  # alpha-rate
        acfg = vcfg.get("alpha_rate", {})
        if not args.store:
            raise InputError("--store required for alpha-rate verification")
        store = _load_store(args)
        grid = _store_grid(store)
        fits = _loglinear_fits(store, grid)
        check = theory.alpha_rate_check(
            fits, acfg.get("expected", 2.0), acfg.get("tolerance", 0.4)
        )
        report = {
            "median": check.median, "q25": check.q25, "q75": check.q75,
            "expected": check.expected, "tolerance": check.tolerance,
            "passed": check.passed, "n_fits": check.n_fits,
        }
        path = out / "verify_alpha_rate.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"{args.target}: {'PASS' if report['passed'] else 'FAIL'} -> {path}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    store = _load_store(args)
    grid = _store_grid(store)
    kvals = np.asarray(grid.values, dtype=np.float64)
    series = []
    for pid in store.point_ids()[:10]:
        means = []
        for k in grid.values:
            deltas = store.deltas(int(pid), int(k))
            means.append(np.mean(deltas) if len(deltas) else np.nan)
        series.append((f"point {pid}", kvals, np.abs(np.asarray(means))))
    svg.line_plot(
        series, out / "psi_curves.svg", title="mean |contribution| vs dataset size",
        xlabel="k", ylabel="|mean contribution|", log_x=True, log_y=True,
    )
    summary = {"n_records": len(store), "n_points": int(len(store.point_ids()))}
    if args.fits:
        fits = fitting.read_fits_jsonl(args.fits)
        alphas = [f.alpha for f in fits]
        svg.histogram(
            alphas, out / "alpha_hist.svg", bins=30,
            title="fitted decay exponents", xlabel="alpha",
        )
        summary["alpha_median"] = float(np.median(alphas))
        summary["n_fits"] = len(fits)
    (out / "report_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"report -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointscale",
        description="Per-point scaling laws for training-data value.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, *, store=False, fits=False, target=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        if store:
            p.add_argument("--store", required=name != "verify", help="sample store path")
        if fits:
            p.add_argument("--fits", default=None, help="fits JSONL path")
        if target:
            p.add_argument("target", choices=["linear", "mestimator", "alpha-rate"])
        p.set_defaults(fn=fn)
        return p

    add("sample", cmd_sample)
    add("fit", cmd_fit, store=True)
    add("amortize", cmd_amortize, store=True)
    add("value", cmd_value, store=True, fits=True)
    add("select", cmd_select, fits=True)
    add("add-eval", cmd_add_eval, fits=True)
    add("verify", cmd_verify, store=True, target=True)
    add("report", cmd_report, store=True, fits=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError, sampler.StoreError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
