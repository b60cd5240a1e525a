"""Command-line entry points: ``train``, ``eval``, ``sweep``, ``demo-bias``, ``solve-exact``.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 infeasible balance problem.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import coerce_train_value, load_config
from .data import SyntheticConfig, binarize, generate_confounded, load_interactions
from .estimators import EstimatorKind
from .exceptions import ContractError, DebalError, InfeasibleError, NumericError
from .factor import load_checkpoint, save_checkpoint
from .metrics import REPORT_HEADER, append_report, evaluate, format_value
from .oracles import BiasReport, monte_carlo_bias, read_problem, solve_entropy_balance
from .training import RUNLOG_HEADER, TrainingData, init_state, train_full

log = logging.getLogger("debal")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
SWEEP_PARAMS = {"lambda": "lam", "lr": "lr_theta", "wd": "wd_theta", "d": "dim", "uniform-fraction": None}
SWEEP_HEADER = ("param", "value", "seed", "status", "val_auc", "auc", "ndcg@5", "ndcg@10", "message")
VALIDATION_SHARE = 0.05


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(x) for x in row])


def _parse_sets(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# train / eval
# --------------------------------------------------------------------------


def _load_run_config(args):
    overrides = _parse_sets(getattr(args, "set", None))
    for flag, key in (("method", "method"), ("seed", "seed"), ("lam", "lam")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        cfg = load_config(args.config, overrides)
    except (ContractError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(int(args.seed),))
    kind = EstimatorKind.parse(cfg.method)
    if not kind.balanced and getattr(args, "lam", None) is not None:
        log.warning("lambda is ignored for unbalanced method %s", kind.method)
    return cfg, kind


def _load_splits(cfg):
    try:
        return cfg.load_splits()
    except (ContractError, ValueError, OSError) as exc:
        raise CliError(str(exc)) from None


def run_training(cfg, kind, seed, out_dir, splits=None):
    """Train one seed, write ``model.ckpt``, ``runlog.csv``, ``metrics.csv``; return (val, test) metrics."""
    splits = splits if splits is not None else _load_splits(cfg)
    tc = replace(cfg.train, seed=int(seed))
    data = TrainingData(splits.biased, splits.balance, splits.validation)
    state = init_state(kind, data.num_users, data.num_items, tc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        train_full(state, tc, data, kind)
    except NumericError as exc:
        with open(out / "diagnostics.txt", "w", newline="\n") as fh:
            fh.write(f"error: {exc}\n")
            for k, v in sorted(exc.context.items()):
                fh.write(f"{k}: {v}\n")
            fh.write(f"outer_iterations_completed: {len(state.history)}\n")
            fh.write(f"steps: {dict(sorted(state.steps.items()))}\n")
        raise CliError(f"numeric failure: {exc} (see {out / 'diagnostics.txt'})", EXIT_NUMERIC) from None
    save_checkpoint(state.theta, out / "model.ckpt")
    _write_csv(out / "runlog.csv", RUNLOG_HEADER, ([r[h] for h in RUNLOG_HEADER] for r in state.history))
    val = evaluate(state.theta, splits.validation, cfg.threshold)
    test = evaluate(state.theta, splits.test, cfg.threshold)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    append_report(metrics_path, {"method": kind.method, "seed": seed, "lambda": tc.lam if kind.balanced else 0.0, **test})
    return val, test


def cmd_train(args):
    cfg, kind = _load_run_config(args)
    splits = _load_splits(cfg)
    out_root = Path(args.out or cfg.output_dir)
    for seed in cfg.seeds:
        out = out_root if len(cfg.seeds) == 1 else out_root / f"seed{seed}"
        _, test = run_training(cfg, kind, seed, out, splits)
        print(",".join(REPORT_HEADER))
        lam = cfg.train.lam if kind.balanced else 0.0
        print(",".join(format_value(x) for x in [kind.method, seed, lam] + [test[m] for m in REPORT_HEADER[3:]]))
    return EXIT_OK


def cmd_eval(args):
    try:
        model = load_checkpoint(args.checkpoint)
    except (DebalError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}") from None
    if args.config:
        cfg, _ = _load_run_config(args)
        table, threshold = _load_splits(cfg).test, cfg.threshold
    elif args.test:
        try:
            table = load_interactions(args.test, args.format, role="uniform-test")
        except (DebalError, OSError) as exc:
            raise CliError(str(exc)) from None
        threshold = args.threshold
        if not table.is_binary:
            table = binarize(table, threshold)
    else:
        raise CliError("eval needs --config or --test")
    if (model.num_users, model.num_items) != (table.num_users, table.num_items):
        raise CliError(
            f"checkpoint is {model.num_users}x{model.num_items} but data is {table.num_users}x{table.num_items}"
        )
    metrics = evaluate(model, table, threshold)
    row = {"method": args.method or "unknown", "seed": args.seed if args.seed is not None else 0,
           "lambda": args.lam if args.lam is not None else 0.0, **metrics}
    print(",".join(REPORT_HEADER))
    print(",".join(format_value(row[h]) for h in REPORT_HEADER))
    if args.out:
        append_report(args.out, row)
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


def _sweep_child(job):
    cfg, kind, param, value, seed, out = job
    try:
        if param == "uniform-fraction":
            if not 0 < value < 1 - VALIDATION_SHARE:
                raise ContractError(f"uniform fraction {value} out of range")
            cfg = replace(cfg, fractions=(value, VALIDATION_SHARE, 1.0 - VALIDATION_SHARE - value))
        else:
            key, parsed = coerce_train_value(SWEEP_PARAMS[param], str(value))
            cfg = cfg.with_train(**{key: parsed})
        val, test = run_training(cfg, kind, seed, out)
        return [param, value, seed, "ok", val["auc"], test["auc"], test["ndcg@5"], test["ndcg@10"], ""]
    except CliError as exc:
        status = "numeric-failure" if exc.code == EXIT_NUMERIC else "error"
        return [param, value, seed, status, "", "", "", "", str(exc)]
    except Exception as exc:  # recorded and the sweep carries on
        return [param, value, seed, "error", "", "", "", "", f"{type(exc).__name__}: {exc}"]


def cmd_sweep(args):
    if args.param not in SWEEP_PARAMS:
        raise CliError(f"--param must be one of {tuple(SWEEP_PARAMS)}")
    values = [v for v in (args.values or "").split(",") if v.strip()]
    if not values:
        raise CliError("empty value list")
    try:
        values = [float(v) for v in values]
    except ValueError:
        raise CliError(f"non-numeric value in {args.values!r}") from None
    cfg, kind = _load_run_config(args)
    _load_splits(cfg)  # fail fast on missing data
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds)
    out_root = Path(args.out or cfg.output_dir)
    jobs = [
        (cfg, kind, args.param, v, s, out_root / f"{args.param}={v!r}" / f"seed{s}") for v in values for s in seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_child, jobs))
    else:
        rows = [_sweep_child(j) for j in jobs]
    out_root.mkdir(parents=True, exist_ok=True)
    _write_csv(out_root / "sweep.csv", SWEEP_HEADER, rows)
    print(f"wrote {len(rows)} rows to {out_root / 'sweep.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# demo-bias / solve-exact
# --------------------------------------------------------------------------


def _synthetic_config(args):
    if args.preset == "one-stratum":
        return SyntheticConfig.one_stratum()
    if not args.config:
        return SyntheticConfig()
    parser = configparser.ConfigParser()
    if not Path(args.config).exists():
        raise CliError(f"config file not found: {args.config}")
    parser.read(args.config, encoding="utf-8")
    section = dict(parser["synthetic"]) if parser.has_section("synthetic") else {}
    types = {f.name: f.type for f in fields(SyntheticConfig)}
    kwargs = {}
    for k, v in section.items():
        if k not in types:
            raise CliError(f"unknown synthetic key {k!r}")
        kwargs[k] = int(v) if types[k] == "int" else float(v) if types[k] == "float" else v
    return SyntheticConfig(**kwargs)


def cmd_demo_bias(args):
    if args.replicates < 100:
        raise CliError("replicates must be >= 100 for a usable standard error")
    base = _synthetic_config(args)
    strengths = [float(s) for s in args.strengths.split(",")] if args.strengths else [0.0, base.confound_strength]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BiasReport.HEADER)
    for s in dict.fromkeys(strengths):
        world, _, _ = generate_confounded(replace(base, confound_strength=s), seed=args.seed)
        for est in ("naive", "ips", "dr"):
            report = monte_carlo_bias(world, est, args.propensity, args.replicates, seed=args.seed)
            writer.writerow(report.row())
    text = buf.getvalue()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_solve_exact(args):
    try:
        problem = read_problem(args.problem)
    except (DebalError, OSError) as exc:
        raise CliError(str(exc)) from None
    try:
        sol = solve_entropy_balance(problem)
    except InfeasibleError as exc:
        lo, hi = exc.interval
        raise CliError(f"infeasible: achievable moment interval is ({lo!r}, {hi!r})", EXIT_INFEASIBLE) from None
    for k, w in enumerate(sol.weights, start=1):
        print(f"w{k} = " + " ".join(repr(float(x)) for x in w))
    for name, value in sol.duals.items():
        print(f"{name} = " + " ".join(repr(float(x)) for x in np.atleast_1d(value)))
    print(f"kkt_residual = {sol.kkt_residual!r}")
    print(f"iterations = {sol.iterations}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="debal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, seed=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--method")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a [train] or [data] key")
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train one model per seed")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--test")
    e.add_argument("--format", default="tsv-triples")
    e.add_argument("--threshold", type=float, default=4.0)
    e.add_argument("--method")
    e.add_argument("--seed", type=int)
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--out", help="metrics CSV to append to")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train/evaluate over a parameter grid and seeds")
    run_flags(s, seed=False)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", help="comma-separated seeds (default: config)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("demo-bias", help="analytic vs Monte Carlo bias under confounding")
    d.add_argument("--config", help="INI file with a [synthetic] section")
    d.add_argument("--preset", choices=("one-stratum",))
    d.add_argument("--strengths", help="comma-separated confound strengths")
    d.add_argument("--replicates", type=int, default=10_000)
    d.add_argument("--propensity", default="nominal", choices=("nominal", "true", "misspecified"))
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_demo_bias)

    x = sub.add_parser("solve-exact", help="solve an entropy-balance problem file")
    x.add_argument("problem")
    x.set_defaults(func=cmd_solve_exact)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DebalError, ValueError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
