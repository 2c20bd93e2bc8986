"""``ramlab`` command-line entry point.

Subcommands: ``gen``, ``train``, ``sweep``, ``bounds`` and ``check``.
Exit codes: 0 success, 1 configuration error, 2 runtime failure (including
diverged training), 3 failed property checks.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bounds as bd
from . import diagnostics, nn
from .errors import ConfigError, NumericalDomainError, ShapeError, TrainingDiverged
from .experiment import (RESULT_HEADER, SCHEMA, SUMMARY_HEADER, SeedContext, experiment_from_dict,
                         experiment_to_dict, fmt, load_json, run_sweep, summarize)
from .ram import _write_rows
from .synthgen import TaskSpec, generate, write_task
from .trainer import TrainTrace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _load_config(path: str | None) -> dict:
    if path is None:
        return {"schema": SCHEMA}
    obj = load_json(path)
    if not isinstance(obj, dict) or obj.get("schema") != SCHEMA:
        raise ConfigError(f"{path}: configuration must be a JSON object with \"schema\": {SCHEMA}")
    return obj


def _out_dir(args, cfg: dict, default: str) -> Path:
    out = Path(args.out or cfg.get("output_dir") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands -------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    extra = set(cfg) - {"schema", "task", "output_dir"}
    if extra:
        raise ConfigError(f"unknown fields for gen: {sorted(extra)}")
    spec = TaskSpec.from_dict(cfg.get("task", {}))
    if args.seed is not None:
        spec = replace(spec, data_seed=args.seed)
    out = _out_dir(args, cfg, "ramlab_task")
    meta = write_task(generate(spec), out)
    print(f"wrote task to {out}: store={spec.store_size} train={spec.n_train} test={spec.n_test} "
          f"bayes_accuracy={meta['bayes_accuracy']:.4f} "
          f"retrieval_free_accuracy={meta['retrieval_free_accuracy']:.4f}")
    return EXIT_OK


def _experiment(args, cfg: dict):
    if args.seed is not None:
        cfg = {k: v for k, v in cfg.items() if k not in ("seed", "seeds")}
        cfg["seeds"] = [args.seed]
    return experiment_from_dict(cfg)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    cfg.setdefault("run", {})
    exp = _experiment(args, cfg)
    if len(exp.runs) != 1 or len(exp.seeds) != 1:
        raise ConfigError("train takes exactly one run and one seed; use sweep for more")
    run, seed = exp.runs[0], exp.seeds[0]
    out = _out_dir(args, cfg, "ramlab_train")
    ctx = SeedContext(exp, seed)
    model, trace = ctx.train_run(run)
    _write_rows(out / "trace.csv", list(TrainTrace.HEADER), trace.rows())
    nn.save_checkpoint(model.retriever, out / "retriever.json")
    nn.save_checkpoint(model.predictor, out / "predictor.json")
    last = trace.records[-1] if trace.records else None
    if last is None:
        print("steps=0: no training performed")
    else:
        print(f"final step={last.step} accuracy={last.test_acc:.4f} recall={last.test_recall:.4f}")
    _write_json(out / "config.json", experiment_to_dict(exp))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    exp = _experiment(args, cfg)
    out = _out_dir(args, cfg, "ramlab_sweep")
    results = run_sweep(exp, threads=args.threads)
    _write_rows(out / "results.csv", RESULT_HEADER, (r.row() for r in results))
    _write_rows(out / "summary.csv", SUMMARY_HEADER, summarize(results))
    _write_json(out / "config.json", experiment_to_dict(exp))
    failed = [r for r in results if r.error]
    print(f"{len(results)} runs, {len(failed)} failed; results in {out}")
    for r in failed:
        print(f"  {r.paradigm}/{r.objective} seed={r.seed}: {r.error}", file=sys.stderr)
    return EXIT_OK


def _log_grid(center: float, lo: float, hi: float, n: int) -> list[float]:
    return list(center * np.logspace(np.log10(lo), np.log10(hi), n))


def cmd_bounds(args) -> int:
    cfg = _load_config(args.config)
    extra = set(cfg) - {"schema", "inputs", "surface", "store_gain", "output_dir"}
    if extra:
        raise ConfigError(f"unknown fields for bounds: {sorted(extra)}")
    bi = bd.BoundInputs.from_dict(cfg.get("inputs", {}))
    out = _out_dir(args, cfg, "ramlab_bounds")
    surf = cfg.get("surface", {})
    lret = surf.get("l_ret", _log_grid(bi.l_ret, 0.01, 10.0, 25))
    lpred = surf.get("l_pred", _log_grid(bi.l_pred, 0.01, 10.0, 25))
    gain = cfg.get("store_gain", {})
    stores = gain.get("store_sizes", [int(v) for v in np.logspace(0, 7, 29)])
    ns = gain.get("n", [10 ** k for k in range(2, 8)])
    for name, grid in (("l_ret", lret), ("l_pred", lpred), ("store_sizes", stores), ("n", ns)):
        if not grid or any(not (isinstance(v, (int, float)) and v > 0) for v in grid):
            raise ConfigError(f"grid {name} must be a non-empty list of positive numbers")

    b = bd.excess_risk_bound(bi)
    _write_rows(out / "breakdown.csv", bd.BREAKDOWN_HEADER, [[fmt(v) for v in bd.breakdown_row(bi, b)]])
    surface = bd.tradeoff_surface(bi, lret, lpred)
    _write_rows(out / "surface.csv", bd.BREAKDOWN_HEADER, ([fmt(v) for v in r] for r in surface))
    rows, cross = bd.store_gain_curve(bi, stores, ns)
    _write_rows(out / "store_gain.csv", bd.STORE_GAIN_HEADER,
                ([str(r[0]), str(r[1]), fmt(r[2]), fmt(r[3]), str(r[4])] for r in rows))
    sched = bd.optimal_schedules(bi.n, bi.num_classes, bi.d_tot, bi.kappa, bi.kappa_store)
    check = bd.retrieval_gain_check(bi.n, bi.store_size, bi.num_classes, bi.d_x, bi.d_tot, bi.kappa,
                                    bi.kappa_store, bi.kappa_true, bi.gamma_store)
    _write_json(out / "report.json", {
        "schema": SCHEMA, "inputs": asdict(bi), "breakdown": asdict(b),
        "schedules": dict(zip(("l_ret", "l_pred", "ell_max"), sched)),
        "joint_rate": bd.joint_rate(bi.n, bi.store_size, bi.num_classes, bi.d_tot, bi.kappa,
                                    bi.kappa_store, bi.gamma_store),
        "no_retrieval_rate": bd.no_retrieval_rate(bi.n, bi.num_classes, bi.d_x, bi.kappa_true),
        "retrieval_gain": asdict(check),
        "crossover_store_size": {str(k): v for k, v in cross.items()},
    })
    print(f"total={b.total!r} gain={check.gain}; wrote breakdown/surface/store_gain CSVs to {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _load_config(args.config)
    extra = set(cfg) - {"schema", "scale", "seed"}
    if extra:
        raise ConfigError(f"unknown fields for check: {sorted(extra)}")
    scale = float(cfg.get("scale", 1.0))
    if not scale > 0:
        raise ConfigError("scale must be positive")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    results = diagnostics.run_all(seed=seed, scale=scale)
    for r in results:
        print(r.line())
    ok = diagnostics.suite_passed(results)
    print("all checks passed" if ok else "property checks FAILED")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sweep": cmd_sweep, "bounds": cmd_bounds,
            "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration (\"schema\": 1)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed(s)")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker processes for sweeps (default 1)")
    parser = argparse.ArgumentParser(prog="ramlab", parents=[common],
                                     description="Retrieval-augmented model experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "write a synthetic task", "train": "train one model",
             "sweep": "run paradigms x objectives x sizes x seeds",
             "bounds": "evaluate excess-risk bounds", "check": "run the numeric property checks"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, argument_default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"runtime error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericalDomainError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
