import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from gala_lab.data_loader import DatasetFormatError, load_dataset, serialize_dataset
from gala_lab.env_assistant import MAX_UPSAMPLE, TrainingDivergedError, export_partition
from gala_lab.graph_synth import build_splits
from gala_lab.models import CheckpointError, save_checkpoint
from gala_lab.objectives import EmptyAssignmentError
from gala_lab.plotting import create_training_curves, save_figure
from gala_lab.scm_core import ScmError
from gala_lab.suite import SpecError, evaluate_acceptance, load_spec, run_suite, write_report
from gala_lab.theory_oracle import OracleError, run_verification, write_records
from gala_lab.trainer import METHODS, MODEL_KIND, PairSamplingError, TrainConfig, build_partition, run

logger = logging.getLogger("gala_lab")

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_ERROR = 2

HANDLED_ERRORS = (
    ScmError,
    OracleError,
    DatasetFormatError,
    CheckpointError,
    EmptyAssignmentError,
    TrainingDivergedError,
    PairSamplingError,
    SpecError,
    FileNotFoundError,
)


def cmd_generate(args: argparse.Namespace) -> int:
    split = build_splits(args.a, args.b, args.per_class, seed=args.seed, eval_per_class=args.eval_per_class)
    serialize_dataset(split, args.out)
    print(f"{args.out}: train {len(split.train)}, val {len(split.val)}, test {len(split.test)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if args.data:
        split = load_dataset(args.data)
    else:
        split = build_splits(args.a, args.b, args.per_class, seed=args.seed)
    config = TrainConfig(
        method=args.method,
        lr=args.lr,
        batch_size=args.batch_size,
        pretrain_epochs=args.pretrain_epochs,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience,
        penalty_weight=args.penalty_weight,
        upsample_k=args.upsample_k,
        seed=args.seed,
        proxy=args.proxy,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    partition = None
    if args.method == "gala" and config.uses_contrast:
        partition = build_partition(split, config)
        export_partition(partition, out_dir / "partition.csv", labels=[g.label for g in split.train])

    result = run(args.method, split, config, partition=partition, progress=args.progress)
    save_checkpoint(result.model, out_dir / "model.pt", MODEL_KIND[args.method], metadata=result.to_record())
    (out_dir / "run.json").write_text(json.dumps(result.to_record(), indent=2, default=str) + "\n", encoding="utf-8")
    save_figure(create_training_curves(result.history), out_dir / "training_curves.html")
    print(json.dumps({"method": result.method, "val_acc": result.val_acc, "test_acc": result.test_acc,
                      "selected_epoch": result.selected_epoch}))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    records = run_verification(grid_size=args.grid_size)
    if args.out:
        write_records(records, Path(args.out))
    for record in records:
        print(f"{'PASS' if record.passed else 'FAIL'} {record.name}: {record.detail}")
    return EXIT_OK if all(r.passed for r in records) else EXIT_ACCEPTANCE


def cmd_suite(args: argparse.Namespace) -> int:
    spec = load_spec(args.config)
    result = run_suite(spec, args.out_dir, workers=args.workers, progress=args.progress,
                       check_oracle=not args.skip_oracle)
    print(result.summary.to_string(index=False))
    for record in result.acceptance:
        print(f"{'PASS' if record.passed else 'FAIL'} {record.name}: {record.detail}")
    return EXIT_OK if result.passed else EXIT_ACCEPTANCE


def cmd_report(args: argparse.Namespace) -> int:
    results = pd.read_csv(args.results)
    results["error"] = results["error"].fillna("")
    summary, _, paths = write_report(results, args.out_dir)
    print(summary.to_string(index=False))
    acceptance = evaluate_acceptance(results)
    for record in acceptance:
        print(f"{'PASS' if record.passed else 'FAIL'} {record.name}: {record.detail}")
    logger.info("Report written to %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK if all(r.passed for r in acceptance) else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gala-lab", description="Invariant subgraph learning experiments")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="Write a two-piece dataset file")
    generate.add_argument("--a", type=float, required=True, help="Invariant strength")
    generate.add_argument("--b", type=float, required=True, help="Training spurious strength")
    generate.add_argument("--per-class", type=int, default=1000)
    generate.add_argument("--eval-per-class", type=int, default=None)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", required=True)
    generate.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="Train one model and save its checkpoint")
    train.add_argument("--method", choices=METHODS, default="gala")
    train.add_argument("--data", help="Dataset file; generated from --a/--b when omitted")
    train.add_argument("--a", type=float, default=0.7)
    train.add_argument("--b", type=float, default=0.9)
    train.add_argument("--per-class", type=int, default=1000)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--batch-size", type=int, default=128)
    train.add_argument("--pretrain-epochs", type=int, default=100)
    train.add_argument("--max-epochs", type=int, default=200)
    train.add_argument("--patience", type=int, default=5)
    train.add_argument("--penalty-weight", type=float, default=1.0)
    train.add_argument("--upsample-k", type=int, default=2, choices=range(1, MAX_UPSAMPLE + 1))
    train.add_argument("--proxy", choices=["label", "cluster"], default="label")
    train.add_argument("--seed", type=int, default=1)
    train.add_argument("--out-dir", default="runs/train")
    train.add_argument("--progress", action="store_true")
    train.set_defaults(func=cmd_train)

    verify = sub.add_parser("verify", help="Run the exact population checks")
    verify.add_argument("--grid-size", type=int, default=9)
    verify.add_argument("--out", help="JSON lines file for the check records")
    verify.set_defaults(func=cmd_verify)

    suite = sub.add_parser("suite", help="Run an experiment suite from a YAML spec")
    suite.add_argument("--config", required=True)
    suite.add_argument("--out-dir", default="runs/suite")
    suite.add_argument("--workers", type=int, default=None, help="Overrides GALA_WORKERS")
    suite.add_argument("--skip-oracle", action="store_true")
    suite.add_argument("--progress", action="store_true")
    suite.set_defaults(func=cmd_suite)

    report = sub.add_parser("report", help="Rebuild summary, workbook and figures from results.csv")
    report.add_argument("--results", required=True)
    report.add_argument("--out-dir", default="runs/report")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HANDLED_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
