"""Command-line entry point: ``fedharness {run,verify,catalog,loo,contrib}``.

Exit codes: 0 success, 1 verification failure, 2 invalid config,
3 contract violation during the run, 4 output directory not writable.
``FEDHARNESS_OUT`` and ``FEDHARNESS_WORKERS`` supply ``--out`` and
``--workers`` when the flags are absent.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .catalog import describe, get_scenario, scenario_names
from .config import ConfigError, config_to_dict, emit_config, parse_config
from .core import ContractViolation
from .engine import ExperimentConfig, run_contribution_analysis, run_experiment, run_leave_one_domain_out

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME, EXIT_OUTPUT = 0, 1, 2, 3, 4

# metrics.csv columns after round and A_u, in this order when present
CSV_OPTIONAL = ("A_O", "I", "R", "C", "V")

log = logging.getLogger("fedharness")


class OutputError(OSError):
    pass


def _clean(value):
    """JSON-safe copy: NaN/inf become None, tuples become lists, numpy scalars become floats."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    value = float(value)
    return value if math.isfinite(value) else None


def build_report(cfg: ExperimentConfig, per_round: list, final: dict, wall_time: float) -> dict:
    return {
        "config_echo": config_to_dict(cfg),
        "per_round": _clean(per_round),
        "final": _clean(final),
        "wall_time_seconds": wall_time,
        "version": __version__,
        "seed": cfg.master_seed,
    }


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, ensure_ascii=False) + "\n"


def metrics_csv(per_round: list) -> str:
    present = [k for k in CSV_OPTIONAL if any(k in row for row in per_round)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "A_u", *present])
    for row in per_round:
        cells = [row["round"], row["A_u"], *(row.get(k) for k in present)]
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in cells])
    return buf.getvalue()


def _resolve_out(flag) -> Path:
    out = flag or os.environ.get("FEDHARNESS_OUT") or "results"
    return Path(out)


def _resolve_workers(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("FEDHARNESS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError([f"FEDHARNESS_WORKERS: expected an integer, got {env!r}"])
    return 1


def _check_writable(out_dir: Path) -> None:
    """Fail before any work if ``out_dir`` cannot be created or written."""
    probe = out_dir
    while not probe.exists():
        if probe.parent == probe:
            break
        probe = probe.parent
    if probe.exists() and (not probe.is_dir() or not os.access(probe, os.W_OK | os.X_OK)):
        raise OutputError(f"output directory {out_dir} is not writable")


def write_outputs(out_dir: Path, files: dict) -> None:
    """Write every file or none: stage into temporaries, then rename into place."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        staged = []
        try:
            for name, text in files.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
                with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
                staged.append((tmp, out_dir / name))
        except OSError:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, dest in staged:
            os.replace(tmp, dest)
    except OSError as exc:
        raise OutputError(f"cannot write to {out_dir}: {exc.strerror or exc}") from exc


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = get_scenario("label_skew_default")
    else:
        cfg = parse_config(Path(args.config))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(["master_seed: must be >= 0"])
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args.out)
    _check_writable(out_dir)
    t0 = time.perf_counter()
    result = run_experiment(cfg, _resolve_workers(args.workers))
    report = build_report(cfg, result.per_round, result.final, time.perf_counter() - t0)
    write_outputs(out_dir, {"results.json": dump_json(report), "metrics.csv": metrics_csv(report["per_round"])})
    print(f"{cfg.scenario}: final A_u {result.final['A_u']:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_loo(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args.out)
    _check_writable(out_dir)
    t0 = time.perf_counter()
    table = run_leave_one_domain_out(cfg, workers=_resolve_workers(args.workers))
    report = {"config_echo": config_to_dict(cfg), "A_O": _clean(table), "version": __version__,
              "seed": cfg.master_seed, "wall_time_seconds": time.perf_counter() - t0}
    write_outputs(out_dir, {"loo.json": dump_json(report)})
    for k, v in table.items():
        print(f"{k:>10s}  {v:.4f}")
    return EXIT_OK


def cmd_contrib(args) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out(args.out)
    _check_writable(out_dir)
    t0 = time.perf_counter()
    result = run_experiment(cfg, _resolve_workers(args.workers))
    rep = run_contribution_analysis(result, with_shapley=not args.no_shapley, rho=args.rho)
    body = {
        "client_ids": rep.client_ids,
        "weights": rep.weights,
        "delta_impacts": rep.delta_impacts,
        "contribution_match": rep.match_score,
        "shapley": rep.shapley,
        "rho": rep.rho,
        "value_full": rep.value_full,
        "value_empty": rep.value_empty,
        "flagged": rep.flagged,
    }
    report = {"config_echo": config_to_dict(cfg), "contribution": _clean(body), "version": __version__,
              "seed": cfg.master_seed, "wall_time_seconds": time.perf_counter() - t0}
    write_outputs(out_dir, {"contribution.json": dump_json(report)})
    print(f"contribution match C = {rep.match_score}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24s} {r.detail}  ({r.seconds:.1f}s)", flush=True)

    results = run_suite(gradient_fault=args.inject_gradient_fault, report=show)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_catalog(args) -> int:
    names = scenario_names()
    if args.name:
        unknown = [n for n in args.name if n not in names]
        if unknown:
            raise ConfigError([f"scenario: unknown scenario {n!r}" for n in unknown])
        for n in args.name:
            print(emit_config(get_scenario(n)))
        return EXIT_OK
    for n in names:
        print(f"{n:<30s} {describe(n)}")
        if args.resolved:
            print(emit_config(get_scenario(n)))
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat TOML config (default: the label_skew_default scenario)")
    p.add_argument("--out", metavar="DIR", help="output directory (env FEDHARNESS_OUT, default ./results)")
    p.add_argument("--seed", type=int, metavar="N", help="override master_seed")
    p.add_argument("--workers", type=int, metavar="N", help="client-training threads (env FEDHARNESS_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedharness", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment, write results.json and metrics.csv")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("loo", help="leave-one-domain-out table of A_O")
    _add_run_flags(p)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("contrib", help="leave-one-out impacts, contribution match and Shapley values")
    _add_run_flags(p)
    p.add_argument("--rho", type=float, default=1.0, help="Shapley scale factor")
    p.add_argument("--no-shapley", action="store_true", help="skip the exact Shapley enumeration")
    p.set_defaults(func=cmd_contrib)

    p = sub.add_parser("verify", help="run the built-in invariant and oracle suite")
    p.add_argument("--inject-gradient-fault", type=float, default=0.0, metavar="EPS", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("catalog", help="list built-in scenarios")
    p.add_argument("name", nargs="*", help="print the resolved config of these scenarios")
    p.add_argument("--resolved", action="store_true", help="print every resolved config")
    p.set_defaults(func=cmd_catalog)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except ContractViolation as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
