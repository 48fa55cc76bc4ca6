"""Command-line entry point.

Subcommands: ``train`` runs multi-seed experiments from a JSON config,
``gradcheck`` verifies the analytic gradients against finite differences,
``synth`` writes a synthetic embedding dataset, and ``aggregate`` collapses
report files into one mean/std row. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 failed check.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataError
from .gradcheck import default_suite
from .metrics import read_report, write_report
from .runner import (
    aggregate_reports,
    run_config_from_dict,
    run_many,
)
from .stream_data import SyntheticSpec, generate_synthetic, save_embeddings

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECK = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softknn",
        description="Soft-KNN routed ensembles for online class-incremental "
                    "learning on embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a multi-seed experiment")
    train.add_argument("--config", type=Path, default=None,
                       help="JSON config file; flags override its values")
    train.add_argument("--seed", type=int, default=None,
                       help="base seed (run i uses base seed + i)")
    train.add_argument("--n-seeds", type=int, default=None)
    train.add_argument("--mode", choices=("soft", "hard"), default=None)
    train.add_argument("--train-keys", action="store_true", default=None)
    train.add_argument("--vote-weighting", choices=("distance", "similarity"),
                       default=None)
    train.add_argument("--out", type=Path, default=None,
                       help="output directory for reports")

    check = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    check.add_argument("--instances", type=int, default=20,
                       help="random instances per suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--iterations", type=int, default=400)

    synth = sub.add_parser("synth", help="write a synthetic embedding dataset")
    synth.add_argument("--classes", type=int, default=10)
    synth.add_argument("--dim", type=int, default=64)
    synth.add_argument("--per-class", type=int, default=100)
    synth.add_argument("--center-norm", type=float, default=1.0)
    synth.add_argument("--noise-std", type=float, default=0.05)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)

    agg = sub.add_parser("aggregate", help="aggregate report files")
    agg.add_argument("reports", nargs="+",
                     help="report JSON paths or glob patterns")
    agg.add_argument("--out", type=Path, default=None,
                     help="CSV output path (default: stdout)")
    return parser


def _load_config_dict(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    def section(name: str) -> dict:
        cfg.setdefault(name, {})
        return cfg[name]

    if args.seed is not None:
        section("run")["base_seed"] = args.seed
    if args.n_seeds is not None:
        section("run")["n_seeds"] = args.n_seeds
    if args.out is not None:
        section("run")["out_dir"] = str(args.out)
    if args.mode is not None:
        section("ensemble")["mode"] = args.mode
    if args.vote_weighting is not None:
        section("ensemble")["vote_weighting"] = args.vote_weighting
    if args.train_keys:
        section("train")["train_keys"] = True
    return cfg


def _write_aggregate_csv(path, aggregate: dict) -> None:
    fields = ["n_runs", "final_accuracy_mean", "final_accuracy_std",
              "forgetting_mean", "forgetting_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        writer.writerow([aggregate[f] for f in fields])


def cmd_train(args: argparse.Namespace) -> int:
    cfg_dict = _apply_overrides(_load_config_dict(args.config), args)
    rc = run_config_from_dict(cfg_dict)
    reports = run_many(rc)

    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        seed = report.config["run"]["seed"]
        path = write_report(report, out_dir / f"report_seed{seed}.json")
        print(f"seed {seed}: accuracy={report.final_accuracy:.4f} "
              f"forgetting={report.forgetting:.4f} "
              f"train_seconds={report.train_seconds:.2f} -> {path}")
    agg = aggregate_reports(reports)
    _write_aggregate_csv(out_dir / "aggregate.csv", agg)
    print(f"aggregate over {agg['n_runs']} seeds: "
          f"accuracy {agg['final_accuracy_mean']:.4f} "
          f"± {agg['final_accuracy_std']:.4f}, "
          f"forgetting {agg['forgetting_mean']:.4f} "
          f"± {agg['forgetting_std']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cases = default_suite(instances=args.instances, seed=args.seed,
                          iterations=args.iterations)
    failures = 0
    for case in cases:
        if case.skipped:
            print(f"SKIP {case.name}: {case.note}")
            continue
        status = "ok" if case.passed else "FAIL"
        print(f"{status} {case.name}: max_rel_error={case.max_rel_error:.3e} "
              f"(tolerance {case.tolerance:.0e})")
        failures += 0 if case.passed else 1
    checked = sum(1 for c in cases if not c.skipped)
    print(f"{checked - failures}/{checked} gradient checks passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(n_classes=args.classes, embed_dim=args.dim,
                         per_class=args.per_class,
                         center_norm=args.center_norm,
                         noise_std=args.noise_std, seed=args.seed)
    ds = generate_synthetic(spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(ds, args.out)
    print(f"wrote {len(ds)} embeddings "
          f"(dim={ds.embed_dim}, classes={ds.n_classes}) to {args.out}")
    return EXIT_OK


def cmd_aggregate(args: argparse.Namespace) -> int:
    paths: list[str] = []
    for pattern in args.reports:
        matched = sorted(glob.glob(pattern))
        paths.extend(matched if matched else [pattern])
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise DataError(f"report files not found: {missing}")
    reports = [read_report(p) for p in paths]
    agg = aggregate_reports(reports)
    if args.out is not None:
        _write_aggregate_csv(args.out, agg)
        print(f"wrote aggregate of {agg['n_runs']} reports to {args.out}")
    else:
        print(json.dumps(agg, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "gradcheck": cmd_gradcheck,
        "synth": cmd_synth,
        "aggregate": cmd_aggregate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
