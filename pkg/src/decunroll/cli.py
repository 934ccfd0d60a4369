"""
Command line entry point.

Every subcommand takes an explicit ``--seed`` where randomness is involved
and writes tidy CSV files headed by a schema line. Wall-clock timings go to
a separate ``*.meta.json`` so CSV payloads are reproducible byte for byte.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .diagnostics import (
    fixed_point,
    lyapunov_check,
    recovery_scaling_experiment,
    bound_chain_check,
    theorem_quantities,
    write_lyapunov_csv,
)
from .errors import (
    ConvergenceError,
    DivergenceError,
    NotPSDError,
    ParameterError,
    ParseError,
    ValidationError,
)
from .instance import InstanceConfig, namse, read_dataset, sample_dataset, sample_instance, write_dataset
from .solvers import ALGORITHMS, ParamSchedule, ProblemBatch, normalize_algorithm, run_solver
from .topology import check_assumption1
from .unroll import LearnableParams, TrainConfig, read_params, train, write_params

log = logging.getLogger("decunroll")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_ALPHAS = (0.001, 0.003, 0.004, 0.005, 0.006)
DEFAULT_LAMBDAS = (0.05, 0.1, 0.3, 0.5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _num(v):
    return format(float(v), ".17g")


def _csv_writer(path, schema):
    fh = open(path, "w", newline="")
    fh.write(f"# schema: {schema}\n")
    return fh, csv.writer(fh, lineterminator="\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def _meta(out, started, **extra):
    meta = {"wall_seconds": time.perf_counter() - started, "finished_unix": time.time()}
    meta.update(extra)
    _write_json(Path(str(out) + ".meta.json"), meta)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _instance_args(p, m_default=300):
    p.add_argument("--nodes", type=int, default=5)
    p.add_argument("--edges", type=int, default=6)
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--m", type=int, default=m_default, help="total measurements")
    p.add_argument("--snr", type=float, default=50.0, help="SNR in dB")
    p.add_argument("--p-s", type=float, default=None, help="expected nonzeros (default m/(2N))")
    p.add_argument("--sigma", type=float, default=None, help="noise std, overrides --snr")


def _instance_cfg(args):
    return InstanceConfig(
        n_nodes=args.nodes, n_edges=args.edges, d=args.d, m_total=args.m,
        snr_db=args.snr, p_s=args.p_s, seed=args.seed, sigma_override=args.sigma,
    )


def _load(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def _batched_run(samples, alg, schedule, K):
    """Vectorized run over a split; returns iterates and a per-sample finite mask."""
    batch = ProblemBatch.from_instances(samples)
    with np.errstate(all="ignore"):
        traj = run_solver(batch, batch, alg, schedule, K, record_metrics=False, check_finite=False)
    ok = np.all(np.isfinite(traj.iterates), axis=(0, 2, 3))
    return batch, traj, ok


def _namse_curve(batch, traj, ok):
    if not ok.any():
        return np.full(len(traj.iterates), np.nan)
    xs = batch.x_star[ok]
    return np.array([namse(x[ok], xs) for x in traj.iterates])


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args):
    cfg = _instance_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"sigma": _num(cfg.sigma()) if np.ndim(cfg.sigma()) == 0 else "per-agent",
            "p_s": _num(cfg.p_s), "seed": str(cfg.seed)}
    written = {}
    for stream, (name, n) in enumerate((("train", args.train), ("val", args.val), ("test", args.test))):
        samples = sample_dataset(cfg, n, stream=stream)
        path = out / f"{name}.txt"
        write_dataset(path, samples, meta)
        written[name] = n
        log.info("wrote %d samples to %s", n, path)
    print(json.dumps(written, sort_keys=True))
    return EXIT_OK


def cmd_solve(args):
    started = time.perf_counter()
    samples = _load(args.dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    alg = normalize_algorithm(args.alg)
    K = args.k
    sched = ParamSchedule.constant(args.alpha, args.lam, max(K, 1))
    batch, traj, ok = _batched_run(samples, alg, sched, K)
    curve = _namse_curve(batch, traj, ok)
    its = traj.iterates[:, ok]
    dev = its - its.mean(axis=-2, keepdims=True)
    cons = np.linalg.norm(dev, axis=-1).max(axis=-1).mean(axis=-1) if ok.any() else np.full(len(curve), np.nan)
    fh, w = _csv_writer(args.out, "decunroll.trajectory/1")
    with fh:
        w.writerow(["iter", "namse_db", "consensus_residual"])
        for k in range(K + 1):
            w.writerow([k, _num(curve[k]), _num(cons[k])])
    summary = {
        "algorithm": alg, "alpha": args.alpha, "lambda": args.lam, "K": K,
        "samples": len(samples), "diverged": int((~ok).sum()),
        "final_namse_db": float(curve[-1]),
    }
    _write_json(str(args.out) + ".summary.json", summary)
    _meta(args.out, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_tune_grid(args):
    started = time.perf_counter()
    samples = _load(args.dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    alg = normalize_algorithm(args.alg)
    rows = []
    for lam in args.lambdas:
        for a in args.alphas:
            batch, traj, ok = _batched_run(samples, alg, ParamSchedule.constant(a, lam, args.k), args.k)
            final = _namse_curve(batch, traj, ok)[-1]
            # divergent samples poison the cell rather than vanish from it
            score = final if ok.all() else float("inf")
            rows.append((a, lam, final, int((~ok).sum()), score))
    best = int(np.argmin([r[4] for r in rows]))
    fh, w = _csv_writer(args.out, "decunroll.grid/1")
    with fh:
        w.writerow(["alpha", "lambda", "final_namse_db", "diverged", "argmin"])
        for i, (a, lam, final, nd, _) in enumerate(rows):
            w.writerow([_num(a), _num(lam), _num(final), nd, int(i == best)])
    a, lam, final = rows[best][:3]
    summary = {"best_alpha": a, "best_lambda": lam, "best_namse_db": float(final), "K": args.k}
    _write_json(str(args.out) + ".summary.json", summary)
    _meta(args.out, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    started = time.perf_counter()
    train_set = _load(args.dataset)
    val_set = _load(args.val) if args.val else []
    cfg = TrainConfig(
        K=args.k, gamma=args.gamma, epochs=args.epochs, batch_size=args.batch,
        lr=args.lr, seed=args.seed, algorithm=args.alg,
        init_alpha=args.init_alpha, init_lambda=args.init_lambda,
    )
    res = train(train_set, val_set, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params_path = out.with_suffix(".params")
    log_path = out.with_suffix(".log.csv")
    write_params(params_path, res.params, cfg.algorithm, cfg.gamma, cfg.seed, cfg.digest())
    fh, w = _csv_writer(log_path, "decunroll.trainlog/1")
    with fh:
        w.writerow(["epoch", "train_loss", "val_namse_db"])
        for row in res.log:
            w.writerow([row["epoch"], _num(row["train_loss"]), _num(row["val_namse_db"])])
    _meta(out, started, epoch_wall_ms=[row["wall_ms"] for row in res.log])
    summary = {"params": str(params_path), "log": str(log_path),
               "best_epoch": res.best_epoch, "best_val_namse_db": res.best_val_namse}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    started = time.perf_counter()
    samples = _load(args.dataset)
    if not samples:
        raise ValidationError("dataset is empty")
    if args.params:
        if not Path(args.params).exists():
            raise FileNotFoundError(f"parameter file not found: {args.params}")
        theta, header = read_params(args.params)
        alg = header["algorithm"] if args.alg is None else normalize_algorithm(args.alg)
        if args.k is not None and args.k != theta.K:
            raise ValidationError(f"parameter file has K={theta.K}, requested K={args.k}")
    else:
        if args.alpha is None or args.lam is None or args.k is None:
            raise UsageError("eval needs --params or all of --alpha, --lambda, --k")
        theta = LearnableParams.constant(args.alpha, args.lam, args.k)
        alg = normalize_algorithm(args.alg or "pg-extra")
    batch, traj, ok = _batched_run(samples, alg, theta.schedule(), theta.K)
    curve = _namse_curve(batch, traj, ok)
    fh, w = _csv_writer(args.out, "decunroll.eval/1")
    with fh:
        w.writerow(["iter", "namse_db"])
        for k, v in enumerate(curve):
            w.writerow([k, _num(v)])
    summary = {"algorithm": alg, "K": theta.K, "samples": len(samples),
               "diverged": int((~ok).sum()), "final_namse_db": float(curve[-1])}
    _write_json(str(args.out) + ".summary.json", summary)
    _meta(args.out, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args):
    started = time.perf_counter()
    inst = sample_instance(_instance_cfg(args))
    pair = inst.mixing_pair()
    tq0 = theorem_quantities(inst, pair, 1.0)
    alpha = args.alpha if args.alpha is not None else args.alpha_mult * tq0.alpha_max
    tq = theorem_quantities(inst, pair, alpha)
    fp = fixed_point(inst, pair, alpha, args.lam)
    with np.errstate(all="ignore"):
        traj = run_solver(inst, pair, "pg-extra", ParamSchedule.constant(alpha, args.lam, args.k),
                          args.k, record_q=True, record_metrics=False, check_finite=False)
    rep = lyapunov_check(traj, fp, tq, pair.W_tilde)
    bound = bound_chain_check(traj, fp, tq, pair.W_tilde, inst.x_star)
    write_lyapunov_csv(args.out, rep)
    checks = {c.name: {"passed": c.passed, "residual": c.residual} for c in check_assumption1(pair)}
    summary = {
        "L_s": tq.L_s, "lambda_min_W_tilde": tq.lambda_min_W_tilde, "alpha": alpha,
        "alpha_max": tq.alpha_max, "xi": tq.xi, "admissible": tq.admissible,
        "fixed_point_method": fp.method, "fixed_point_residual": fp.residual,
        "lyapunov": "PASS" if rep.passed else "FAIL",
        "lyapunov_violations": rep.n_violations,
        "bound_chain": "PASS" if bound.passed else "FAIL",
        "bound_chain_min_relative_slack": bound.min_relative_slack,
        "assumption1": checks,
    }
    _write_json(str(args.out) + ".summary.json", summary)
    _meta(args.out, started)
    print(json.dumps({k: summary[k] for k in ("alpha", "alpha_max", "xi", "lyapunov", "bound_chain")},
                     sort_keys=True))
    return EXIT_OK


def cmd_scaling(args):
    started = time.perf_counter()
    cfg = _instance_cfg(args)
    res = recovery_scaling_experiment(cfg, args.m_list, args.trials)
    for w_ in res.warnings:
        log.warning(w_)
    fh, w = _csv_writer(args.out, "decunroll.scaling/1")
    with fh:
        w.writerow(["m", "mse", "mse_std"])
        for m, v, s in zip(res.m_list, res.mse, res.mse_std):
            w.writerow([int(m), _num(v), _num(s)])
    summary = {"slope": None if res.degenerate else res.slope, "degenerate": res.degenerate,
               "trials": res.trials, "warnings": res.warnings}
    _write_json(str(args.out) + ".summary.json", summary)
    _meta(args.out, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="decunroll", description="Decentralized LASSO solvers and learned unrolling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample train/val/test datasets")
    _instance_args(g)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train", type=int, default=1000)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--test", type=int, default=100)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="run a fixed-parameter solver over a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--alg", choices=ALGORITHMS, default="pg-extra")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--k", type=int, default=200)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("tune-grid", help="grid search over (alpha, lambda)")
    t.add_argument("--dataset", required=True)
    t.add_argument("--alg", choices=ALGORITHMS, default="pg-extra")
    t.add_argument("--alphas", type=_float_list, default=list(DEFAULT_ALPHAS))
    t.add_argument("--lambdas", type=_float_list, default=list(DEFAULT_LAMBDAS))
    t.add_argument("--k", type=int, default=200)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    t.set_defaults(func=cmd_tune_grid)

    tr = sub.add_parser("train", help="learn per-iteration step sizes and thresholds")
    tr.add_argument("--dataset", required=True, help="training split")
    tr.add_argument("--val", default=None, help="validation split for model selection")
    tr.add_argument("--alg", choices=ALGORITHMS, default="pg-extra")
    tr.add_argument("--k", type=int, default=10)
    tr.add_argument("--gamma", type=float, default=0.9)
    tr.add_argument("--epochs", type=int, default=500)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--init-alpha", type=float, default=None)
    tr.add_argument("--init-lambda", type=float, default=0.1)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True, help="output prefix")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a learned or constant schedule")
    e.add_argument("--dataset", required=True)
    e.add_argument("--params", default=None)
    e.add_argument("--alg", choices=ALGORITHMS, default=None)
    e.add_argument("--alpha", type=float, default=None)
    e.add_argument("--lambda", dest="lam", type=float, default=None)
    e.add_argument("--k", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="certify the PG-EXTRA descent inequality on one instance")
    _instance_args(d, m_default=50)
    d.set_defaults(d=30)
    d.add_argument("--alpha", type=float, default=None)
    d.add_argument("--alpha-mult", type=float, default=0.5, help="alpha as a multiple of alpha_max")
    d.add_argument("--lambda", dest="lam", type=float, default=0.1)
    d.add_argument("--k", type=int, default=500)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("scaling", help="LASSO recovery error against m")
    _instance_args(c, m_default=60)
    c.set_defaults(p_s=8.0, snr=30.0)
    c.add_argument("--m-list", type=_int_list, default=[60, 120, 240, 480])
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_scaling)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError, ValidationError) as exc:
        print(f"decunroll: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"decunroll: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, ConvergenceError, NotPSDError, FloatingPointError) as exc:
        print(f"decunroll: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
