"""Experiment orchestration and the command line interface.

Verbs:

* ``train``: split, normalize, optionally select beta, train, evaluate, over
  a number of seeded repetitions; writes metric records, a summary, traces
  and the resolved configuration.
* ``select-beta``: the grid search alone, emitting one record per beta.
* ``evaluate``: score a saved model on a dataset split.
* ``diagnose-bias``: bias statistics of a sampling estimator against a
  reference gradient at initialization.
* ``check-bounds``: verify the derivative envelopes for every likelihood.
* ``emit-curves``: reshape result records into long-format plot tables.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 sampling
failure. Metric files contain no timing, so reruns with the same seed are
byte-identical; wall-clock times go to the trace files only.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from .data import Normalizer, resolve_dataset, split_dataset
from .diagnostics import check_bounds, estimate_bias
from .errors import GpdlmError, InputError, NumericalError, SamplingError
from .estimators import EstimatorConfig
from .kernels import ARD_RBF, ISO_RBF
from .likelihoods import make_likelihood
from .objectives import ObjectiveSpec
from .trainer import (TrainConfig, default_likelihood, evaluate,
                      initialize_model, initialize_posterior, load_state,
                      save_state, select_beta, train)


@dataclasses.dataclass
class ExperimentConfig:
    dataset: str
    task: str | None = None
    n_synthetic: int = 1000
    data_format: str | None = None
    label_col: str = "y"
    likelihood: str | None = None      # default chosen from the task
    objective: ObjectiveSpec = dataclasses.field(
        default_factory=lambda: ObjectiveSpec(kind="elbo", beta=1.0))
    estimator: EstimatorConfig = dataclasses.field(default_factory=EstimatorConfig)
    training: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    num_inducing: int = 20
    kernel_kind: str = ISO_RBF
    train_size: int | None = None
    repetitions: int = 5
    do_select_beta: bool = False
    seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("objective"), dict):
            d["objective"] = ObjectiveSpec(**d["objective"])
        if isinstance(d.get("estimator"), dict):
            d["estimator"] = EstimatorConfig(**d["estimator"])
        if isinstance(d.get("training"), dict):
            d["training"] = TrainConfig(**d["training"])
        return ExperimentConfig(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)  # the same experiment can write anywhere
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def _likelihood_from_config(config: ExperimentConfig, model):
    if config.likelihood is None:
        return default_likelihood(task_of_config(config), model)
    if config.likelihood == "gaussian":
        return make_likelihood("gaussian", variance=model.noise_variance or 0.1)
    return make_likelihood(config.likelihood)


def task_of_config(config: ExperimentConfig) -> str:
    ds = resolve_dataset(config.dataset, task=config.task,
                         n=config.n_synthetic, seed=config.seed,
                         fmt=config.data_format, label_col=config.label_col)
    return ds.task


def _prepare_split(config: ExperimentConfig, seed: int):
    ds = resolve_dataset(config.dataset, task=config.task,
                         n=config.n_synthetic, seed=config.seed,
                         fmt=config.data_format, label_col=config.label_col)
    train_ds, val_ds, test_ds, info = split_dataset(ds, seed=seed,
                                                    train_size=config.train_size)
    norm = Normalizer.fit(train_ds)
    return (norm.apply(train_ds), norm.apply(val_ds), norm.apply(test_ds),
            info, norm)


def run_repetition(config: ExperimentConfig, rep: int):
    """One seeded split/train/evaluate pass; returns (record, trace, result)."""
    os.makedirs(config.out_dir, exist_ok=True)
    seed = config.seed + rep
    train_ds, val_ds, test_ds, info, norm = _prepare_split(config, seed)
    model = initialize_model(train_ds.X, train_ds.y, train_ds.task,
                             M=config.num_inducing, seed=seed,
                             kernel_kind=config.kernel_kind)
    q = initialize_posterior(model)
    lik = _likelihood_from_config(config, model)
    cfg = dataclasses.replace(config.training, seed=seed)
    est = dataclasses.replace(config.estimator, rng_seed=seed)
    spec = config.objective

    record = {"repetition": rep, "seed": seed, "method": spec.kind,
              "estimator": est.kind, "beta": spec.beta,
              "split_sizes": info.sizes, "class_balance": info.class_balance,
              "normalizer": norm.to_dict()}
    beta_records = None
    if config.do_select_beta:
        sel = select_beta((train_ds.X, train_ds.y), (val_ds.X, val_ds.y),
                          spec, est, cfg, model, q, lik)
        spec = dataclasses.replace(spec, beta=sel["best_beta"])
        record["selected_beta"] = sel["best_beta"]
        record["beta"] = sel["best_beta"]
        beta_records = sel["records"]

    result = train((train_ds.X, train_ds.y), model, q, lik, spec, est, cfg,
                   eval_data=(test_ds.X, test_ds.y))
    save_state(os.path.join(config.out_dir, f"state_rep{rep}.npz"),
               result.model, result.q, lik)
    metrics = evaluate(result.model, result.q, lik, (test_ds.X, test_ds.y))
    record.update({"converged": result.converged,
                   "iterations": result.iterations,
                   "metrics": metrics,
                   "telemetry": result.telemetry or {}})
    if result.metric_trace:
        record["metric_trace"] = result.metric_trace
    return record, result, beta_records


def run_experiment(config: ExperimentConfig) -> dict:
    """All repetitions plus the summary; writes the result files and returns
    their paths with the in-memory records."""
    os.makedirs(config.out_dir, exist_ok=True)
    records = []
    beta_tables = []
    failures = []
    for rep in range(config.repetitions):
        try:
            record, result, beta_records = run_repetition(config, rep)
            records.append(record)
            if beta_records:
                for row in beta_records:
                    beta_tables.append({"repetition": rep, **row})
            _write_trace(config, rep, result)
        except (NumericalError, SamplingError) as exc:
            # training aborts are recorded without halting the batch;
            # input errors propagate
            failures.append({"repetition": rep, "error": str(exc),
                             "kind": type(exc).__name__})

    summary = _summarize(records)
    payload = {"config_hash": config.config_hash(), "records": records,
               "failures": failures, "summary": summary}
    metrics_path = os.path.join(config.out_dir, "metrics.json")
    _dump_json(payload, metrics_path)
    if records:
        flat = [{"repetition": r["repetition"], "seed": r["seed"],
                 "method": r["method"], "beta": r["beta"],
                 "converged": r["converged"], "iterations": r["iterations"],
                 **r["metrics"]} for r in records]
        _write_csv(os.path.join(config.out_dir, "metrics.csv"), flat)
    _dump_json(config.to_dict(), os.path.join(config.out_dir,
                                              "resolved_config.json"))
    if beta_tables:
        _write_csv(os.path.join(config.out_dir, "beta_grid.csv"), beta_tables)
    payload["paths"] = {"metrics": metrics_path, "out_dir": config.out_dir}
    return payload


def _summarize(records) -> dict:
    out = {}
    if not records:
        return out
    keys = records[0]["metrics"].keys()
    for k in keys:
        vals = np.array([r["metrics"][k] for r in records], dtype=float)
        out[k] = {"mean": float(vals.mean()),
                  "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals)))
                  if len(vals) > 1 else 0.0}
    return out


def _write_trace(config, rep, result):
    path = os.path.join(config.out_dir, f"trace_rep{rep}.csv")
    per_iter = result.wall_ms_per_iter
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "wall_ms"])
        for i, val in enumerate(result.objective_trace):
            w.writerow([i, repr(val), f"{per_iter * (i + 1):.3f}"])


def _write_csv(path, rows):
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in rows:
            w.writerow([_cell(row.get(k)) for k in keys])


def _jsonify(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v)}")


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonify)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True, default=_jsonify)
    return "" if v is None else v


def emit_curves(records, x: str, y: str, series: str = "method"):
    """Long-format rows (x, y, series) from result records; records missing a
    key are skipped. Returns the rows with a header first."""
    rows = [[x, y, series]]
    for rec in records:
        flat = dict(rec)
        flat.update(rec.get("metrics", {}))
        if x in flat and y in flat:
            rows.append([flat[x], flat[y], flat.get(series, "")])
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_run_args(p):
    p.add_argument("--config", help="JSON file with an ExperimentConfig")
    p.add_argument("--dataset", help="synthetic name or data file path")
    p.add_argument("--task", choices=["regression", "binary", "count"])
    p.add_argument("--n-synthetic", type=int)
    p.add_argument("--format", dest="data_format", choices=["csv", "libsvm"])
    p.add_argument("--label-col")
    p.add_argument("--likelihood",
                   choices=["gaussian", "probit", "logistic", "poisson-exp",
                            "poisson-softplus"])
    p.add_argument("--objective", choices=["elbo", "dlm-log", "dlm-square"])
    p.add_argument("--beta", type=float)
    p.add_argument("--loss-scaling", choices=["sum", "mean"])
    p.add_argument("--estimator", choices=["exact", "bmc", "smooth-bmc", "ups"])
    p.add_argument("--samples", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=["joint", "fixed-hyper"])
    p.add_argument("--eval-every", type=int,
                   help="record test metrics every k epochs (learning curves)")
    p.add_argument("--num-inducing", "-M", type=int)
    p.add_argument("--kernel", choices=[ISO_RBF, ARD_RBF])
    p.add_argument("--train-size", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--select-beta", action="store_true", default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)


def _config_from_args(args) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    config = ExperimentConfig.from_dict(base) if base else \
        ExperimentConfig(dataset=args.dataset or "sine")
    upd = {}
    simple = {"dataset": args.dataset, "task": args.task,
              "n_synthetic": args.n_synthetic, "data_format": args.data_format,
              "label_col": args.label_col, "likelihood": args.likelihood,
              "num_inducing": args.num_inducing, "kernel_kind": args.kernel,
              "train_size": args.train_size, "repetitions": args.repetitions,
              "do_select_beta": args.select_beta, "seed": args.seed,
              "out_dir": args.out_dir}
    for k, v in simple.items():
        if v is not None:
            upd[k] = v
    config = dataclasses.replace(config, **upd)
    obj = {}
    if args.objective is not None:
        obj["kind"] = args.objective
    if args.beta is not None:
        obj["beta"] = args.beta
    if args.loss_scaling is not None:
        obj["loss_scaling"] = args.loss_scaling
    if obj:
        config = dataclasses.replace(
            config, objective=dataclasses.replace(config.objective, **obj))
    estu = {}
    if args.estimator is not None:
        estu["kind"] = args.estimator
    if args.samples is not None:
        estu["samples"] = args.samples
    if args.nu is not None:
        estu["nu"] = args.nu
    if estu:
        config = dataclasses.replace(
            config, estimator=dataclasses.replace(config.estimator, **estu))
    tru = {}
    if args.learning_rate is not None:
        tru["learning_rate"] = args.learning_rate
    if args.max_iters is not None:
        tru["max_iters"] = args.max_iters
    if args.batch_size is not None:
        tru["batch_size"] = args.batch_size
    if args.mode is not None:
        tru["mode"] = args.mode
    if getattr(args, "eval_every", None) is not None:
        tru["eval_every"] = args.eval_every
    if tru:
        config = dataclasses.replace(
            config, training=dataclasses.replace(config.training, **tru))
    if config.dataset is None:
        raise InputError("no dataset given (flag --dataset or config file)")
    return config


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    payload = run_experiment(config)
    n_ok = len(payload["records"])
    print(f"completed {n_ok}/{config.repetitions} repetitions; "
          f"metrics in {payload['paths']['metrics']}")
    for k, stats in payload["summary"].items():
        print(f"  {k}: {stats['mean']:.5f} +- {stats['stderr']:.5f}")
    return 0


def _cmd_select_beta(args) -> int:
    config = _config_from_args(args)
    os.makedirs(config.out_dir, exist_ok=True)
    seed = config.seed
    train_ds, val_ds, _, _, _ = _prepare_split(config, seed)
    model = initialize_model(train_ds.X, train_ds.y, train_ds.task,
                             M=config.num_inducing, seed=seed,
                             kernel_kind=config.kernel_kind)
    q = initialize_posterior(model)
    lik = _likelihood_from_config(config, model)
    sel = select_beta((train_ds.X, train_ds.y), (val_ds.X, val_ds.y),
                      config.objective,
                      dataclasses.replace(config.estimator, rng_seed=seed),
                      dataclasses.replace(config.training, seed=seed),
                      model, q, lik)
    path = os.path.join(config.out_dir, "beta_selection.json")
    _dump_json(sel, path)
    _write_csv(os.path.join(config.out_dir, "beta_grid.csv"), sel["records"])
    print(f"selected beta = {sel['best_beta']} (records in {path})")
    return 0


def _cmd_evaluate(args) -> int:
    model, q, lik = load_state(args.model)
    config = _config_from_args(args)
    _, _, test_ds, _, _ = _prepare_split(config, config.seed)
    metrics = evaluate(model, q, lik, (test_ds.X, test_ds.y))
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "evaluation.json")
    _dump_json(metrics, path)
    for k, v in metrics.items():
        print(f"  {k}: {v:.6f}")
    return 0


def _cmd_diagnose_bias(args) -> int:
    config = _config_from_args(args)
    os.makedirs(config.out_dir, exist_ok=True)
    seed = config.seed
    train_ds, _, _, _, _ = _prepare_split(config, seed)
    sub = min(args.points, train_ds.n)
    model = initialize_model(train_ds.X, train_ds.y, train_ds.task,
                             M=config.num_inducing, seed=seed,
                             kernel_kind=config.kernel_kind)
    q = initialize_posterior(model)
    lik = _likelihood_from_config(config, model)
    report = estimate_bias(
        (train_ds.X[:sub], train_ds.y[:sub]), model, q, lik,
        dataclasses.replace(config.estimator, rng_seed=seed),
        reference=args.reference, repeats=args.repeats, seed=seed,
        spec=config.objective if config.objective.kind != "dlm-square"
        else ObjectiveSpec(kind="dlm-log", beta=config.objective.beta))
    out = {"estimator": report.estimator_kind, "samples": report.samples,
           "repeats": report.repeats,
           "bias_m": report.bias["m"].tolist(),
           "bias_LV": report.bias["LV"].tolist(),
           "se_m": report.standard_error["m"].tolist(),
           "se_LV": report.standard_error["LV"].tolist(),
           "c1_systematic": report.c1_systematic,
           "c2_systematic": report.c2_systematic,
           "c1_step_mean": report.c1_step_mean,
           "c2_step_mean": report.c2_step_mean,
           "denominator_min_proxy": report.denominator_min_proxy,
           "reference": report.reference}
    path = os.path.join(config.out_dir, "bias_report.json")
    _dump_json(out, path)
    print(f"bias report in {path}; |bias| = "
          f"{float(np.linalg.norm(report.bias_vector())):.6g}, "
          f"c1 = {report.c1_systematic:.4f}, c2 = {report.c2_systematic:.4f}")
    return 0


def _cmd_check_bounds(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    cases = [("logistic", make_likelihood("logistic"), [0, 1]),
             ("gaussian", make_likelihood("gaussian", variance=1.0), [0.0]),
             ("probit", make_likelihood("probit"), [0, 1]),
             ("poisson-softplus", make_likelihood("poisson-softplus"),
              [0, 1, 2, 5, 10]),
             ("poisson-exp", make_likelihood("poisson-exp"), [0, 1, 2, 5, 10]),
             ("student-t-1", make_likelihood("student-t", nu=1.0, variance=1.0),
              [0.0]),
             ("student-t-3", make_likelihood("student-t", nu=3.0, variance=1.0),
              [0.0]),
             ("student-t-10", make_likelihood("student-t", nu=10.0,
                                              variance=1.0), [0.0])]
    rows = []
    ok = True
    for name, lik, ys in cases:
        res = check_bounds(lik, ys)
        ok &= res.passed
        rows.append({"likelihood": name, "passed": res.passed,
                     "worst_slack": res.worst_slack,
                     "worst_location": res.worst_location})
        print(f"  {name:18s} {'pass' if res.passed else 'FAIL'}  "
              f"worst slack {res.worst_slack:.3e}")
    _dump_json(rows, os.path.join(args.out_dir, "bound_checks.json"))
    return 0 if ok else 3


def _cmd_emit_curves(args) -> int:
    with open(args.results) as fh:
        payload = json.load(fh)
    records = payload.get("records", payload if isinstance(payload, list) else [])
    rows = emit_curves(records, x=args.x, y=args.y, series=args.series)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow(row)
    print(f"wrote {len(rows) - 1} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gp-dlm",
        description="Sparse GP training by direct loss minimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run repetitions of split/train/evaluate")
    _add_run_args(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("select-beta", help="validation grid search over beta")
    _add_run_args(p)
    p.set_defaults(fn=_cmd_select_beta)

    p = sub.add_parser("evaluate", help="score a saved model on the test split")
    _add_run_args(p)
    p.add_argument("--model", required=True, help="saved .npz state")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("diagnose-bias",
                       help="estimator bias statistics at initialization")
    _add_run_args(p)
    p.add_argument("--repeats", type=int, default=1000)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--reference", choices=["exact", "bmc"], default="exact")
    p.set_defaults(fn=_cmd_diagnose_bias)

    p = sub.add_parser("check-bounds", help="verify the derivative envelopes")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_check_bounds)

    p = sub.add_parser("emit-curves", help="reshape records to plot tables")
    p.add_argument("--results", required=True, help="metrics.json from a run")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--series", default="method")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_emit_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except GpdlmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
