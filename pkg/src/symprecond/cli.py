"""Command-line pipeline: gen-problems, datagen, train, eval, bench.

Every command writes its artifact and records the run in
``manifest.json`` next to it (one manifest per output directory, one
entry per output file).  Exit status: 0 on success, 2 for bad
arguments or configuration, 1 for failures while running.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .datagen import Objective, ParamDataset, SearchConfig, build_dataset
from .deploy import ParamPolicy, bench_compare, feature_key
from .expr import eval_batch, nrmse, reward
from .krylov import SolverConfig
from .precond import DEFAULT_PARAMS, PrecondConfig, PrecondKind
from .problems import Family, generate_problems, read_problems, write_problems
from .train import PRESETS, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("symprecond")

JOBS_ENV = "SYMPRECOND_JOBS"


class ConfigError(Exception):
    pass


def _range(text):
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not lo < hi:
        raise argparse.ArgumentTypeError("range needs LO < HI")
    return lo, hi


def _weights(text):
    try:
        w = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W_COND,W_TIME,W_ITERS, got {text!r}")
    if len(w) != 3:
        raise argparse.ArgumentTypeError("need three weights")
    return w


def _add_solver_args(p):
    p.add_argument("--solver", choices=["gmres", "cg", "richardson"], default="gmres")
    p.add_argument("--tol", type=float, default=1e-7, help="relative residual tolerance")
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--restart", type=int, default=30)


def _add_precond_args(p):
    p.add_argument("--precond", choices=["sor", "ssor", "amg"], required=True)
    p.add_argument("--smoother", choices=["jacobi", "sor"], default="jacobi",
                   help="AMG smoother")


def _default_jobs():
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="symprecond", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-problems", help="sample PDE instances to JSONL")
    p.add_argument("--family", choices=[f.value for f in Family], required=True)
    p.add_argument("--grid", type=int, default=64, help="interior points per side")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--symmetric", action="store_true",
                   help="elliptic only: drop first-order terms")
    p.add_argument("--compact", action="store_true",
                   help="store features and seed only; matrices rebuilt on load")
    p.add_argument("--out", required=True)

    p = sub.add_parser("datagen", help="search optimal parameters per instance")
    p.add_argument("--problems", required=True)
    _add_precond_args(p)
    p.add_argument("--objective", choices=["time", "iters", "cond", "hybrid"],
                   default="iters")
    p.add_argument("--weights", type=_weights, help="W_COND,W_TIME,W_ITERS for hybrid")
    p.add_argument("--range", type=_range, help="search range LO:HI")
    p.add_argument("--method", choices=["grid", "binary"], default="grid")
    p.add_argument("--coarse", type=float, default=0.05)
    p.add_argument("--fine", type=float, default=0.001)
    p.add_argument("--precision", type=float, default=0.001)
    p.add_argument("--no-fallback", action="store_true",
                   help="binary search: keep bisecting on non-unimodal objectives")
    p.add_argument("--repeats", type=int, default=3)
    _add_solver_args(p)
    p.add_argument("--n", type=int, help="use only the first N problems")
    p.add_argument("--n-test", type=int, help="test rows (default: 1 in 6)")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="search for a parameter formula")
    p.add_argument("--dataset", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--samples", type=int, help="total sampled expressions")
    p.add_argument("--lr", type=float)
    p.add_argument("--eps", type=float, help="risk factor")
    p.add_argument("--entropy", type=float, help="entropy weight")
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--const-opt", choices=["all", "elite"])
    p.add_argument("--trace", help="trace CSV (default: <out stem>.trace.csv)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a formula on a dataset")
    p.add_argument("--expr-file", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")

    p = sub.add_parser("bench", help="compare parameter policies on problems")
    p.add_argument("--problems", required=True)
    _add_precond_args(p)
    p.add_argument("--expr-file", help="learned formula (symbolic policy)")
    p.add_argument("--fixed", type=float, action="append", default=[],
                   help="extra fixed-value policy (repeatable)")
    p.add_argument("--optimal-dataset", help="dataset CSV with per-instance optima")
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the unpreconditioned row")
    p.add_argument("--no-optimal-constant", action="store_true")
    p.add_argument("--constant-step", type=float, default=0.05)
    p.add_argument("--metric", choices=["iters", "time"], default="iters")
    p.add_argument("--cond", action="store_true", help="also estimate condition numbers")
    _add_solver_args(p)
    p.add_argument("--cells", help="per-instance CSV (optional)")
    p.add_argument("--out", required=True)
    return ap


# -- helpers ----------------------------------------------------------------


def _solver(args) -> SolverConfig:
    try:
        return SolverConfig(args.solver, args.tol, args.max_iters, args.restart)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _precond(args) -> PrecondConfig:
    try:
        return PrecondConfig(args.precond, smoother=args.smoother)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _load_problems(path):
    if not Path(path).is_file():
        raise ConfigError(f"no such problem file: {path}")
    return list(read_problems(path))


def _write_manifest(args, outputs, inputs=(), extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    for out in outputs:
        out = Path(out)
        mpath = out.parent / "manifest.json"
        try:
            with open(mpath) as fh:
                manifest = json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError):
            manifest = {"runs": {}}
        manifest["runs"][out.name] = {
            "command": args.command,
            "config": cfg,
            "seed": cfg.get("seed"),
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            **(extra or {}),
        }
        with open(mpath, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")


# -- commands ---------------------------------------------------------------


def cmd_gen_problems(args):
    if args.count < 1 or args.grid < 2:
        raise ConfigError("need --count >= 1 and --grid >= 2")
    probs = generate_problems(args.family, args.count, args.grid, args.seed, args.symmetric)
    n = write_problems(args.out, probs, compact=args.compact)
    _write_manifest(args, [args.out])
    print(f"wrote {n} problems to {args.out}")


def cmd_datagen(args):
    problems = _load_problems(args.problems)
    try:
        weights = args.weights if args.objective == "hybrid" else None
        objective = Objective(args.objective, weights)
        lo, hi = args.range if args.range else (None, None)
        search = SearchConfig(args.method, lo, hi, args.coarse, args.fine, args.precision,
                              fallback=not args.no_fallback, repeats=args.repeats,
                              solver=_solver(args))
    except ValueError as exc:
        raise ConfigError(str(exc))
    ds = build_dataset(problems, _precond(args), objective, search, n=args.n,
                       seed=args.seed, n_test=args.n_test, jobs=args.jobs)
    ds.write(args.out)
    _write_manifest(args, [args.out], [args.problems])
    print(f"wrote {len(ds)} rows ({len(ds.train_idx)} train / {len(ds.test_idx)} test) "
          f"to {args.out}")


def cmd_train(args):
    ds = _read_dataset(args.dataset)
    cfg = PRESETS[args.preset]
    over = {"seed": args.seed, "batch_size": args.batch_size, "total_samples": args.samples,
            "learning_rate": args.lr, "eps": args.eps, "entropy_weight": args.entropy,
            "optimizer": args.optimizer, "const_opt": args.const_opt}
    try:
        cfg = TrainConfig(**{**cfg.to_json(), **{k: v for k, v in over.items()
                                                  if v is not None}})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    X, y = ds.train()
    Xt, yt = ds.test()
    res = train(X, y, cfg, Xt if len(yt) >= 2 else None, yt if len(yt) >= 2 else None)
    trace_path = args.trace or str(Path(args.out).with_suffix("")) + ".trace.csv"
    save_checkpoint(args.out, res, cfg, {"dataset": args.dataset})
    res.trace.write_csv(trace_path)
    _write_manifest(args, [args.out, trace_path], [args.dataset])
    print(f"best: {res.best}")
    print(f"train R {res.best_reward!r}")
    if res.test_reward is not None:
        print(f"test R {res.test_reward!r}")


def _read_dataset(path) -> ParamDataset:
    if not Path(path).is_file():
        raise ConfigError(f"no such dataset: {path}")
    return ParamDataset.read(path)


def _read_expr(path):
    if not Path(path).is_file():
        raise ConfigError(f"no such expression file: {path}")
    expr, _ = load_checkpoint(path)
    return expr


def cmd_eval(args):
    ds = _read_dataset(args.dataset)
    expr = _read_expr(args.expr_file)
    if args.split == "train":
        X, y = ds.train()
    elif args.split == "test":
        X, y = ds.test()
    else:
        X, y = ds.X, ds.Y[:, 0]
    if len(y) < 2:
        raise ConfigError(f"split {args.split!r} has fewer than two rows")
    print(f"expression {expr}")
    print(f"NRMSE {nrmse(y, eval_batch(expr, X))!r}")
    print(f"R {reward(expr, X, y)!r}")


def cmd_bench(args):
    problems = _load_problems(args.problems)
    precond = _precond(args)
    kind = PrecondKind(args.precond)
    policies = {}
    if not args.no_baseline:
        policies["none"] = ParamPolicy.none()
    policies["default"] = ParamPolicy.fixed(DEFAULT_PARAMS[kind])
    for v in args.fixed:
        policies[f"fixed={v!r}"] = ParamPolicy.fixed(v)
    inputs = [args.problems]
    if args.expr_file:
        policies["symbolic"] = ParamPolicy.symbolic(_read_expr(args.expr_file))
        inputs.append(args.expr_file)
    if args.optimal_dataset:
        ds = _read_dataset(args.optimal_dataset)
        policies["per-instance-optimal"] = ParamPolicy.optimal(
            {feature_key(x): float(y) for x, y in zip(ds.X, ds.Y[:, 0])})
        inputs.append(args.optimal_dataset)
    rep = bench_compare(problems, policies, precond, _solver(args), with_cond=args.cond,
                        optimal_constant=not args.no_optimal_constant,
                        constant_step=args.constant_step, metric=args.metric)
    with open(args.out, "w") as fh:
        fh.write(rep.to_csv())
    outs = [args.out]
    if args.cells:
        with open(args.cells, "w") as fh:
            fh.write(rep.cells_csv())
        outs.append(args.cells)
    _write_manifest(args, outs, inputs, {"notes": rep.notes})
    sys.stdout.write(rep.to_csv())


COMMANDS = {"gen-problems": cmd_gen_problems, "datagen": cmd_datagen, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail with status 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
