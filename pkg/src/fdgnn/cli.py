"""Command-line entry point: run training, compare methods, report costs, gradient check.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical aborts.
The FDGNN_THREADS environment variable caps `compare`'s worker threads.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agents import stack_flat_params, stacked_gradients
from .gcnn import LayerSpec, ParamSet, central_gradient, forward, init_params, mse_loss, save_params
from .graphs import build_shift, generate_er
from .netsim import cost_table, write_ledger_csv, write_trace_csv
from .trainer import (
    RunConfig,
    TrainingDiverged,
    train_centralized,
    train_distributed,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMPARE_METHODS = (
    ("central-sgd", "central-sgd", None),
    ("central-adam", "central-adam", None),
    ("d-naive", "d-naive", "naive-per-sample"),
    ("d-naive-piggyback", "d-naive", "piggyback-consensus"),
    ("d-sgd", "d-sgd", "piggyback-do"),
    ("d-adam", "d-adam", "piggyback-do"),
    ("d-amsgrad", "d-amsgrad", "piggyback-do"),
)


class ConfigError(ValueError):
    pass


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--graph", choices=("ba", "er", "file"))
    parser.add_argument("--graph-file", dest="graph_file")
    parser.add_argument("--n", type=int)
    parser.add_argument("--m", type=int)
    parser.add_argument("--p", type=float)
    parser.add_argument("--shift")
    parser.add_argument("--layers", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--n-train", dest="n_train", type=int)
    parser.add_argument("--n-test", dest="n_test", type=int)
    parser.add_argument("--noise-var", dest="noise_var", type=float)
    parser.add_argument("--teacher-hidden", dest="teacher_hidden", type=int)
    parser.add_argument("--optimizer")
    parser.add_argument("--strategy")
    parser.add_argument("--batch", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", dest="alpha", type=float)
    parser.add_argument("--lr-decay", dest="decay", type=float)
    parser.add_argument("--K", dest="K", type=int)
    parser.add_argument("--eval-every", dest="eval_every", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--topology-mode", dest="topology_mode")
    parser.add_argument("--engine", choices=("agents", "stacked"))
    parser.add_argument("--trace", action="store_true", default=None,
                        help="also export the per-round message-size trace")
    parser.add_argument("--out", default="out", help="output directory")


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config-file values, then explicit flags."""
    merged = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        unknown = set(data) - set(merged)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(data)
    for name in merged:
        value = getattr(args, name, None)
        if name == "track_trace":
            value = getattr(args, "trace", None)
        if value is not None:
            merged[name] = value
    cfg = RunConfig(**merged)
    try:
        cfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cfg


def _run_one(cfg: RunConfig):
    if cfg.optimizer in ("central-sgd", "central-adam"):
        return train_centralized(cfg)
    return train_distributed(cfg)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = _run_one(cfg)
    except TrainingDiverged as err:
        save_params(err.last_params, out / "checkpoint.json")
        print(f"aborted: {err} (last finite checkpoint written)", file=sys.stderr)
        return EXIT_NUMERIC
    result.log.to_csv(out / "metrics.csv")
    save_params(result.theta_star, out / "checkpoint.json")
    final = result.log.final
    if result.ledger is not None:
        rows = [
            {
                "strategy": cfg.strategy,
                "L": cfg.layers,
                "B": cfg.batch,
                "K": cfg.K,
                "rounds": result.ledger.rounds,
                "broadcasts": result.ledger.broadcasts,
                "scalars": result.ledger.scalars,
            }
        ]
        if cfg.track_trace:
            write_trace_csv(out / "trace.csv", result.ledger)
    else:
        rows = [
            {
                "strategy": "centralized",
                "L": cfg.layers,
                "B": cfg.batch,
                "K": cfg.K,
                "rounds": final.rounds,
                "broadcasts": 0,
                "scalars": 0,
            }
        ]
    write_ledger_csv(out / "ledger.csv", rows)
    print(
        f"{cfg.optimizer} on {cfg.graph} n={cfg.n}: "
        f"{final.t} updates, {final.rounds} rounds, "
        f"train_mse={final.train_mse:.6f}, test_mse={final.test_mse:.6f}"
    )
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    env = os.environ.get("FDGNN_THREADS")
    workers = len(COMPARE_METHODS)
    if env:
        try:
            workers = max(1, int(env))
        except ValueError as err:
            raise ConfigError(f"FDGNN_THREADS must be an integer: {env!r}") from err
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(method):
        name, kind, strategy = method
        run_cfg = replace(cfg, optimizer=kind, strategy=strategy or cfg.strategy)
        return name, _run_one(run_cfg)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, COMPARE_METHODS))

    lines = ["method,t,rounds,train_mse,test_mse,consensus_gap"]
    for name, res in results:
        for r in res.log.records:
            lines.append(
                f"{name},{r.t},{r.rounds},{r.train_mse!r},{r.test_mse!r},{r.consensus_gap!r}"
            )
    (out / "compare.csv").write_text("\n".join(lines) + "\n")
    for name, res in results:
        final = res.log.final
        print(
            f"{name:>18}: rounds={final.rounds:>8} "
            f"train_mse={final.train_mse:.6f} test_mse={final.test_mse:.6f}"
        )
    return EXIT_OK


def cmd_costs(args: argparse.Namespace) -> int:
    if args.L < 1 or args.B < 1 or args.K < 1:
        raise ConfigError("L, B and K must be positive")
    rows = cost_table(args.L, args.B, args.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ledger_csv(out / "costs.csv", rows)
    header = f"{'strategy':<22}{'formula':>10}{'measured':>10}{'broadcasts':>12}{'scalars':>10}"
    print(header)
    ok = True
    for row in rows:
        match = row["rounds"] == row["expected_rounds"]
        ok = ok and match
        flag = "" if match else "  MISMATCH"
        print(
            f"{row['strategy']:<22}{row['expected_rounds']:>10}{row['rounds']:>10}"
            f"{row['broadcasts']:>12}{row['scalars']:>10}{flag}"
        )
    return EXIT_OK if ok else 1


def _finite_difference(specs, theta, shift, X, y, step=1e-6):
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        bumped = theta.copy()
        bumped[k] += step
        hi, _ = forward(ParamSet.from_flat(specs, bumped), shift, X)
        bumped[k] -= 2 * step
        lo, _ = forward(ParamSet.from_flat(specs, bumped), shift, X)
        grad[k] = (mse_loss(y, hi) - mse_loss(y, lo)) / (2 * step)
    return grad


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.n < 2 or args.layers < 1:
        raise ConfigError("need n >= 2 and layers >= 1")
    rng = np.random.default_rng(args.seed)
    graph = generate_er(args.n, 0.6, args.seed)
    shift = build_shift(graph, "normalized-adjacency")
    widths = [args.g0] + [args.hidden] * (args.layers - 1) + [1]
    specs = tuple(
        LayerSpec(widths[k], widths[k + 1],
                  "identity" if k == args.layers - 1 else "leaky-relu")
        for k in range(args.layers)
    )
    params = init_params(specs, "glorot", args.seed + 1)
    X = rng.normal(size=(graph.n, args.g0))
    y = rng.normal(size=graph.n)
    theta = params.flatten()
    th0, th1 = stack_flat_params(specs, np.tile(theta, (graph.n, 1)))
    local = stacked_gradients(specs, th0, th1, shift.S, X[None], y[None]).grads
    averaged = local.mean(axis=0)
    dense = central_gradient(params, shift, X, y)
    fd = _finite_difference(specs, theta, shift, X, y)
    mask = np.abs(fd) > 1e-8
    rel_fd = float(np.max(np.abs(averaged[mask] - fd[mask]) / np.abs(fd[mask])))
    rel_dense = float(
        np.max(np.abs(averaged - dense)) / max(np.max(np.abs(dense)), 1e-30)
    )
    print(f"averaged-local vs finite-difference max relative error: {rel_fd:.3e}")
    print(f"averaged-local vs dense backprop   max relative error: {rel_dense:.3e}")
    passed = rel_fd < 1e-4
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdgnn",
        description="Distributed graph-convolution training simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    _add_run_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="run the seven methods on one shared dataset")
    _add_run_flags(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_costs = sub.add_parser("costs", help="per-strategy communication cost table")
    p_costs.add_argument("--L", type=int, required=True)
    p_costs.add_argument("--B", type=int, required=True)
    p_costs.add_argument("--K", type=int, default=1)
    p_costs.add_argument("--out", default="out")
    p_costs.set_defaults(func=cmd_costs)

    p_gc = sub.add_parser("gradcheck", help="compare local gradients against oracles")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--n", type=int, default=10)
    p_gc.add_argument("--layers", type=int, default=2)
    p_gc.add_argument("--g0", type=int, default=3)
    p_gc.add_argument("--hidden", type=int, default=4)
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
