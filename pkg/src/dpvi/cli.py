"""Command line experiment runner.

Subcommands: ``fit-logreg``, ``fit-gmm``, ``account``, ``synth`` and
``plot-data``. Experiments are configured with an INI-style file (one level
of sections) whose keys can be overridden with ``--set section.key=value``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import (
    MechanismParams,
    advanced_pipeline_epsilon,
    bounded_dp_epsilon,
    calibrate_sigma_for_budget,
)
from .data import (
    ColumnSchema,
    load_csv,
    standardize,
    synth_gmm,
    synth_logreg,
    train_test_split,
)
from .models import GmmModel, LogRegModel, classification_accuracy, gmm_predictive_likelihood
from .optimizer import OptimizerConfig, run_dpvi

logger = logging.getLogger("dpvi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

METHODS = ("moments", "advanced")


class ConfigError(ValueError):
    pass


COMMON_DEFAULTS = {
    "experiment": {"repeats": "10", "seed": "0", "output_dir": "results", "name": ""},
    "optimizer": {
        "step_size": "0.5",
        "clip": "5.0",
        "noise_multiplier": "",
        "mc_samples": "1",
        "adagrad_fuzz": "1e-8",
        "sampling": "poisson",
    },
    "accounting": {"epsilons": "", "methods": "moments,advanced", "non_private": "true"},
}

TASK_DEFAULTS = {
    "logreg": {
        "data": {
            "source": "synthetic",
            "path": "",
            "schema": "",
            "n": "4000",
            "d": "8",
            "w_scale": "5.0",
            "train_fraction": "0.8",
        },
        "optimizer": {"sampling_ratio": "0.05", "steps": "1000"},
        "accounting": {"delta": "1e-5"},
        "model": {
            "prior_var": "1.0",
            "fit_intercept": "true",
            "non_private_sampling_ratio": "0.05",
            "non_private_steps": "1000",
        },
    },
    "gmm": {
        "data": {"source": "synthetic", "path": "", "test_path": "", "n_train": "1000", "n_test": "100"},
        # extra draws per step steer the mixture away from collapsed optima
        "optimizer": {"sampling_ratio": "0.003", "steps": "3000", "mc_samples": "4"},
        "accounting": {"delta": "1e-3"},
        "model": {
            "components": "5",
            "dirichlet_alpha": "1.0",
            "init_spread": "1.0",
            "predictive_samples": "1000",
            "non_private_sampling_ratio": "0.01",
            "non_private_steps": "5000",
        },
    },
}


def materialize_config(task: str, path: str | None = None, overrides=()) -> configparser.ConfigParser:
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(COMMON_DEFAULTS)
    cfg.read_dict(TASK_DEFAULTS[task])
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.read(path, encoding="utf-8")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if not cfg.has_section(section):
            raise ConfigError(f"unknown config section {section!r}")
        cfg.set(section, option, value.strip())
    cfg.set("experiment", "task", task)
    return cfg


def config_dict(cfg: configparser.ConfigParser) -> dict:
    return {s: dict(cfg.items(s)) for s in cfg.sections()}


def _get(cfg, section, key, kind=str):
    raw = cfg.get(section, key, fallback="").strip()
    try:
        if kind is bool:
            return cfg.getboolean(section, key)
        if kind is list:
            return [v.strip() for v in raw.split(",") if v.strip()]
        if kind is float and raw.lower() in ("inf", "infinity"):
            return math.inf
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _optional_float(cfg, section, key):
    raw = cfg.get(section, key, fallback="").strip()
    return None if raw == "" else _get(cfg, section, key, float)


# -- data preparation -----------------------------------------------------------


def _logreg_data(cfg, seed):
    source = _get(cfg, "data", "source")
    if source == "synthetic":
        data = synth_logreg(_get(cfg, "data", "n", int), _get(cfg, "data", "d", int),
                            _get(cfg, "data", "w_scale", float), seed)
    elif source == "csv":
        schema_path = _get(cfg, "data", "schema")
        if not schema_path:
            raise ConfigError("[data] schema is required for csv sources")
        data = load_csv(_get(cfg, "data", "path"), ColumnSchema.from_json(schema_path))
    else:
        raise ConfigError(f"[data] source: unknown source {source!r}")
    train, test = train_test_split(data, _get(cfg, "data", "train_fraction", float), seed)
    train, test, report = standardize(train, test)
    add_bias = _get(cfg, "model", "fit_intercept", bool)

    def design(X):
        return np.hstack([X, np.ones((X.shape[0], 1))]) if add_bias else X

    return design(train.X), train.y, design(test.X), test.y, report


def _gmm_data(cfg, seed):
    source = _get(cfg, "data", "source")
    if source == "synthetic":
        train, test = synth_gmm(_get(cfg, "data", "n_train", int), _get(cfg, "data", "n_test", int), seed)
        return train.X, test.X
    if source == "csv":
        load = lambda p: np.loadtxt(p, delimiter=",", ndmin=2)  # noqa: E731
        return load(_get(cfg, "data", "path")), load(_get(cfg, "data", "test_path"))
    raise ConfigError(f"[data] source: unknown source {source!r}")


# -- experiment -------------------------------------------------------------------


def _arms(cfg, task):
    """Experiment arms: (method, target_epsilon, noise_multiplier, q, steps)."""
    q = _get(cfg, "optimizer", "sampling_ratio", float)
    steps = _get(cfg, "optimizer", "steps", int)
    delta = _get(cfg, "accounting", "delta", float)
    methods = _get(cfg, "accounting", "methods", list)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"[accounting] methods: unknown method {m!r}")
    epsilons = [float(e) for e in _get(cfg, "accounting", "epsilons", list)]
    sigma = _optional_float(cfg, "optimizer", "noise_multiplier")
    arms = []
    if epsilons:
        for method in methods:
            for eps in epsilons:
                arms.append((method, eps, calibrate_sigma_for_budget(eps, delta, q, steps, method), q, steps))
    elif sigma is not None:
        if sigma == 0:
            raise ConfigError("noise_multiplier = 0 is non-private; use [accounting] non_private")
        arms.append(("fixed_sigma", None, sigma, q, steps))
    if _get(cfg, "accounting", "non_private", bool):
        arms.append((
            "non_private", None, 0.0,
            _get(cfg, "model", "non_private_sampling_ratio", float),
            _get(cfg, "model", "non_private_steps", int),
        ))
    if not arms:
        raise ConfigError("nothing to run: set [accounting] epsilons, a noise_multiplier or non_private")
    return arms


def _one_run(cfg, task, arm, seed, trace_path):
    method, target, sigma, q, steps = arm
    private = sigma > 0
    opt = OptimizerConfig(
        sampling_ratio=q,
        steps=steps,
        step_size=_get(cfg, "optimizer", "step_size", float),
        clip=_get(cfg, "optimizer", "clip", float) if private else math.inf,
        noise_multiplier=sigma,
        mc_samples=_get(cfg, "optimizer", "mc_samples", int),
        seed=seed,
        adagrad_fuzz=_get(cfg, "optimizer", "adagrad_fuzz", float),
        private=private,
        target_delta=_get(cfg, "accounting", "delta", float),
        sampling=_get(cfg, "optimizer", "sampling"),
    )
    if task == "logreg":
        X, y, Xt, yt, _ = _logreg_data(cfg, seed)
        model = LogRegModel(X.shape[1], 0.0, _get(cfg, "model", "prior_var", float))
        vp, trace = run_dpvi(model, X, y, model.initial_posterior(), opt)
        metric_name, metric = "test_accuracy", classification_accuracy(vp, Xt, yt)
    else:
        X, Xt = _gmm_data(cfg, seed)
        model = GmmModel(_get(cfg, "model", "components", int), X.shape[1],
                         _get(cfg, "model", "dirichlet_alpha", float))
        vp0 = model.initial_posterior(np.random.SeedSequence([seed, 1]),
                                      spread=_get(cfg, "model", "init_spread", float))
        vp, trace = run_dpvi(model, X, None, vp0, opt)
        metric_name = "predictive_likelihood"
        metric = gmm_predictive_likelihood(
            vp, model, Xt, _get(cfg, "model", "predictive_samples", int),
            np.random.SeedSequence([seed, 2]),
        )
    trace.metadata.update(config=config_dict(cfg), version=__version__, seed=seed)
    trace.write(trace_path)
    eps = {m: None for m in METHODS}
    if trace.privacy is not None:
        eps["moments"] = trace.privacy.moments.epsilon
        if trace.privacy.advanced is not None:
            eps["advanced"] = trace.privacy.advanced.epsilon
    return metric_name, metric, eps


def _sem(values):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def run_experiment(cfg: configparser.ConfigParser) -> Path:
    """Run every arm for ``repeats`` seeds; returns the aggregate file path."""
    task = cfg.get("experiment", "task")
    repeats = _get(cfg, "experiment", "repeats", int)
    base_seed = _get(cfg, "experiment", "seed", int)
    if repeats < 1:
        raise ConfigError("[experiment] repeats must be >= 1")
    out = Path(_get(cfg, "experiment", "output_dir"))
    (out / "traces").mkdir(parents=True, exist_ok=True)
    name = _get(cfg, "experiment", "name") or task
    materialized = config_dict(cfg)
    arms = _arms(cfg, task)

    rows = []
    with open(out / f"{name}_runs.jsonl", "w", encoding="utf-8") as runs_fh:
        for arm in arms:
            method, target, sigma = arm[:3]
            metrics, eps_seen, failures = [], {m: [] for m in METHODS}, 0
            for r in range(repeats):
                seed = base_seed + r
                tag = f"{method}_{'np' if target is None else f'{target:g}'}_seed{seed}"
                trace_path = out / "traces" / f"{name}_{tag}.jsonl"
                record = {
                    "method": method, "target_epsilon": target, "noise_multiplier": sigma,
                    "seed": seed, "trace": str(trace_path),
                    "config": materialized, "version": __version__,
                    "metadata": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()},
                }
                try:
                    metric_name, metric, eps = _one_run(cfg, task, arm, seed, trace_path)
                except (ArithmeticError, ValueError) as exc:
                    failures += 1
                    record["error"] = f"{type(exc).__name__}: {exc}"
                    logger.warning("run %s failed: %s", tag, exc)
                else:
                    metrics.append(metric)
                    for m in METHODS:
                        if eps[m] is not None:
                            eps_seen[m].append(eps[m])
                    record.update(metric=metric_name, value=metric,
                                  epsilon={m: eps[m] for m in METHODS})
                runs_fh.write(json.dumps(record, sort_keys=True) + "\n")
            accounted = eps_seen.get(method) or eps_seen["moments"]
            rows.append({
                "method": method,
                "target_epsilon": target,
                "epsilon": float(accounted[0]) if accounted else None,
                "epsilon_by_method": {m: (v[0] if v else None) for m, v in eps_seen.items()},
                "noise_multiplier": sigma,
                "metric": "test_accuracy" if task == "logreg" else "predictive_likelihood",
                "metric_mean": float(np.mean(metrics)) if metrics else None,
                "metric_sem": _sem(metrics) if metrics else None,
                "n_runs": len(metrics),
                "n_failed": failures,
            })

    aggregate = {"task": task, "config": materialized, "version": __version__, "rows": rows}
    agg_path = out / f"{name}_aggregate.json"
    agg_path.write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return agg_path


# -- plot data ----------------------------------------------------------------------


def emit_plot_data(aggregate_paths, out_dir) -> list[Path]:
    """One CSV per aggregate: ``epsilon`` then ``<method>_mean, <method>_sem`` columns.

    Rows are sorted by epsilon; the non-private baseline sits at ``inf``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in aggregate_paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"aggregate file not found: {path}")
        rows = json.loads(path.read_text(encoding="utf-8"))["rows"]
        methods = list(dict.fromkeys(r["method"] for r in rows))
        table: dict[float, dict] = {}
        for r in rows:
            if r["metric_mean"] is None:
                continue
            eps = r["target_epsilon"] if r["target_epsilon"] is not None else r["epsilon"]
            eps = math.inf if eps is None else float(eps)
            table.setdefault(eps, {})[r["method"]] = (r["metric_mean"], r["metric_sem"])
        target = out_dir / f"{path.stem.removesuffix('_aggregate')}_plot.csv"
        with open(target, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epsilon"] + [f"{m}_{s}" for m in methods for s in ("mean", "sem")])
            for eps in sorted(table):
                cells = [repr(eps) if math.isfinite(eps) else "inf"]
                for m in methods:
                    mean, sem = table[eps].get(m, ("", ""))
                    cells += [mean, sem]
                writer.writerow(cells)
        written.append(target)
    return written


# -- account ----------------------------------------------------------------------------


def account_query(q, sigma, steps, delta, method="both", clip=1.0, dataset_size=None) -> list[dict]:
    """Budgets for one mechanism as JSON-ready dicts, one per method."""
    if sigma == 0:
        raise ConfigError("non-private configuration has no finite guarantee")
    params = MechanismParams(sigma, clip, q, steps, dataset_size or max(1, math.ceil(1.0 / q)))
    wanted = METHODS if method == "both" else (method,)
    lines = []
    for m in wanted:
        if m == "moments":
            budget = bounded_dp_epsilon(params, delta)
        elif m == "advanced":
            budget = advanced_pipeline_epsilon(params, delta)
        else:
            raise ConfigError(f"unknown method {m!r}")
        lines.append({
            "method": m, "epsilon": budget.epsilon, "delta": budget.delta,
            "q": q, "sigma": sigma, "T": steps, "adjacency": budget.adjacency.value,
        })
    return lines


# -- entry point ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpvi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("fit-logreg", "fit-gmm"):
        p = sub.add_parser(name, help=f"run the {name[4:]} experiment")
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("account", help="print epsilon for a mechanism")
    p.add_argument("--q", type=float, required=True, help="sampling ratio")
    p.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p.add_argument("--steps", "-T", type=int, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--method", choices=("moments", "advanced", "both"), default="both")

    p = sub.add_parser("synth", help="write synthetic data sets as CSV")
    p.add_argument("--kind", choices=("logreg", "gmm"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--w-scale", type=float, default=5.0)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=100)

    p = sub.add_parser("plot-data", help="turn aggregate files into CSV plot data")
    p.add_argument("aggregates", nargs="+")
    p.add_argument("--out", default=".")
    return parser


def _synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gmm":
        train, test = synth_gmm(args.n_train, args.n_test, args.seed)
        np.savetxt(out / "gmm_train.csv", train.X, delimiter=",", fmt="%.17g")
        np.savetxt(out / "gmm_test.csv", test.X, delimiter=",", fmt="%.17g")
        return
    data = synth_logreg(args.n, args.d, args.w_scale, args.seed)
    with open(out / "logreg.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row, label in zip(data.X, data.y):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])
    schema = {
        "columns": [{"name": n, "kind": "numeric"} for n in data.feature_names]
        + [{"name": "y", "kind": "label"}],
        "label_rule": {"positive": ["1"]},
    }
    (out / "logreg_schema.json").write_text(json.dumps(schema, indent=2), encoding="utf-8")
    (out / "logreg_meta.json").write_text(json.dumps(data.meta), encoding="utf-8")


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "account":
            for line in account_query(args.q, args.sigma, args.steps, args.delta, args.method):
                print(json.dumps(line, sort_keys=True))
        elif args.command in ("fit-logreg", "fit-gmm"):
            task = "logreg" if args.command == "fit-logreg" else "gmm"
            cfg = materialize_config(task, args.config, args.set)
            print(run_experiment(cfg))
        elif args.command == "synth":
            _synth(args)
        elif args.command == "plot-data":
            for path in emit_plot_data(args.aggregates, args.out):
                print(path)
    except (ConfigError, configparser.Error) as exc:
        print(f"dpvi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        code = EXIT_CONFIG if args.command == "account" else EXIT_RUNTIME
        print(f"dpvi: error: {exc}", file=sys.stderr)
        return code
    except (ArithmeticError, OSError) as exc:
        print(f"dpvi: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
