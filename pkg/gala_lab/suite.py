"""
Experiment suites: many (method, dataset, seed) runs, aggregated into a report.
"""
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch_geometric
import yaml
from tqdm import tqdm

from gala_lab.analysis import (
    cooccurrence_curves,
    dataset_name,
    edge_score_gap,
    edge_scores_by_graph,
    filter_results,
    identification_f1,
    runs_to_frame,
    summarize_runs,
    sweep_table,
)
from gala_lab.data_loader import FORMAT_VERSION, write_results_workbook
from gala_lab.env_assistant import MAX_UPSAMPLE, partition_by_rule
from gala_lab.graph_synth import build_splits
from gala_lab.models import CHECKPOINT_VERSION
from gala_lab.plotting import save_report_figures
from gala_lab.scm_core import BitKind
from gala_lab.theory_oracle import CheckRecord, run_verification
from gala_lab.trainer import METHODS, TrainConfig, build_partition, run

logger = logging.getLogger(__name__)

WORKERS_ENV = "GALA_WORKERS"
DEFAULT_DATASETS = ((0.7, 0.9), (0.8, 0.9), (0.8, 0.6), (0.8, 0.7))
# graphs per class for the co-occurrence audit (3 classes, n >= 3000)
COOCCURRENCE_PER_CLASS = 1000
AUDIT_COLUMNS = ["source", "cell", "count", "invariant", "spurious"]


class SpecError(ValueError):
    """Invalid experiment spec."""


@dataclass
class ExperimentSpec:
    name: str = "suite"
    datasets: List[Tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_DATASETS))
    methods: List[str] = field(default_factory=lambda: ["erm", "ciga_contrast", "gala", "oracle_groundtruth"])
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    per_class: int = 1000
    eval_per_class: Optional[int] = None
    penalty_grid: List[float] = field(default_factory=list)
    upsample_grid: List[int] = field(default_factory=list)
    sweep_dataset: Tuple[float, float] = (0.7, 0.9)
    # TrainConfig overrides shared by every run
    train: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.datasets = [tuple(float(v) for v in pair) for pair in self.datasets]
        self.sweep_dataset = tuple(float(v) for v in self.sweep_dataset)
        if not self.seeds:
            raise SpecError("seeds must not be empty")
        if not self.methods:
            raise SpecError("methods must not be empty")
        if not self.datasets:
            raise SpecError("datasets must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise SpecError(f"unknown methods {unknown}; expected a subset of {list(METHODS)}")
        for pair in self.datasets + [self.sweep_dataset]:
            if len(pair) != 2:
                raise SpecError(f"dataset strengths must be (a, b) pairs, got {pair}")
        if self.per_class < 1:
            raise SpecError(f"per_class must be >= 1, got {self.per_class}")
        if any(not 1 <= int(k) <= MAX_UPSAMPLE for k in self.upsample_grid):
            raise SpecError(f"upsample_grid values must lie in [1, {MAX_UPSAMPLE}], got {self.upsample_grid}")
        bad = set(self.train) - {f.name for f in fields(TrainConfig)} | ({"method", "seed"} & set(self.train))
        if bad:
            raise SpecError(f"train overrides not allowed: {sorted(bad)}")


@dataclass
class RunCell:
    kind: str
    method: str
    a: float
    b: float
    seed: int
    penalty_weight: float
    upsample_k: int


@dataclass
class SuiteResult:
    results: pd.DataFrame
    summary: pd.DataFrame
    sweeps: Dict[str, pd.DataFrame]
    curves: Dict[str, pd.DataFrame]
    acceptance: List[CheckRecord]
    paths: Dict[str, Path]

    @property
    def passed(self) -> bool:
        return all(record.passed for record in self.acceptance)


def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    """
    Read an ExperimentSpec from YAML.

    Raises:
        SpecError: On unknown keys or invalid values
    """
    with Path(path).open("r", encoding="utf-8") as handle:
        raw = yaml.safe_load(handle) or {}
    if not isinstance(raw, dict):
        raise SpecError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {f.name for f in fields(ExperimentSpec)}
    if unknown:
        raise SpecError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return ExperimentSpec(**raw)
    except TypeError as exc:
        raise SpecError(f"{path}: {exc}") from exc


def resolve_workers(requested: Optional[int] = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", WORKERS_ENV, os.environ[WORKERS_ENV])
        return 1


def plan_cells(spec: ExperimentSpec) -> List[RunCell]:
    """Main grid plus the gala penalty and upsampling sweeps, in a fixed order."""
    base = TrainConfig(**spec.train)
    cells = [
        RunCell("main", method, a, b, seed, base.penalty_weight, base.upsample_k)
        for (a, b) in spec.datasets
        for method in spec.methods
        for seed in spec.seeds
    ]
    a, b = spec.sweep_dataset
    cells += [
        RunCell("sweep_penalty", "gala", a, b, seed, float(weight), base.upsample_k)
        for weight in spec.penalty_grid
        for seed in spec.seeds
    ]
    cells += [
        RunCell("sweep_upsample", "gala", a, b, seed, base.penalty_weight, int(k))
        for k in spec.upsample_grid
        for seed in spec.seeds
    ]
    return cells


def run_cell(cell: RunCell, spec: ExperimentSpec) -> Dict[str, object]:
    """
    Train and evaluate one cell; failures are returned as records, not raised.

    Returns:
        Dict[str, object]: One row of the result table
    """
    record = asdict(cell)
    try:
        split = build_splits(cell.a, cell.b, spec.per_class, seed=cell.seed, eval_per_class=spec.eval_per_class)
        config = TrainConfig(
            **{**spec.train, "method": cell.method, "seed": cell.seed,
               "penalty_weight": cell.penalty_weight, "upsample_k": cell.upsample_k}
        )
        result = run(cell.method, split, config)
        scores = edge_scores_by_graph(result.model, split.test)
        masks = [np.asarray(g.inv_edge_mask) for g in split.test]
        stats = result.partition_stats or {}
        record.update(
            test_acc=result.test_acc,
            val_acc=result.val_acc,
            train_acc=result.train_acc,
            selected_epoch=result.selected_epoch,
            identification_f1=identification_f1(scores, masks) if scores else float("nan"),
            edge_score_gap=edge_score_gap(scores, masks) if scores else float("nan"),
            negative_fraction=stats.get("negative_fraction", float("nan")),
            status="ok",
            error="",
        )
    except Exception as exc:
        logger.warning("Cell %s failed: %s: %s", cell, type(exc).__name__, exc)
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return record


def _execute(cells: Sequence[RunCell], spec: ExperimentSpec, workers: int, progress: bool) -> List[Dict[str, object]]:
    if workers <= 1:
        iterator = tqdm(cells, desc=spec.name) if progress else cells
        return [run_cell(cell, spec) for cell in iterator]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, cell, spec) for cell in cells]
        iterator = tqdm(futures, desc=spec.name) if progress else futures
        return [future.result() for future in iterator]


def cooccurrence_audit(
    datasets: Sequence[Tuple[float, float]],
    seed: int = 1,
    per_class: int = COOCCURRENCE_PER_CLASS,
    train: Optional[Dict[str, object]] = None,
) -> Dict[str, pd.DataFrame]:
    """
    Co-occurrence per cell of a trained assistant's partition, per dataset.

    The assistant is the one gala would train for ``seed`` with the ``train``
    overrides. Rows with source ``spurious_rule`` partition the same graphs on
    the ground-truth spurious bit and serve as the population reference.

    Returns:
        Dict[str, pd.DataFrame]: Columns source, cell, count, invariant, spurious
    """
    config = TrainConfig(**{**(train or {}), "method": "gala", "seed": seed})
    curves = {}
    for a, b in datasets:
        split = build_splits(a, b, per_class, seed=seed, eval_per_class=1)
        trained = cooccurrence_curves(build_partition(split, config), split.train)
        reference = cooccurrence_curves(partition_by_rule(split.train, BitKind.SPURIOUS), split.train)
        frame = pd.concat(
            [trained.assign(source="assistant"), reference.assign(source="spurious_rule")],
            ignore_index=True,
        )
        curves[dataset_name(a, b)] = frame[AUDIT_COLUMNS]
        logger.info("Co-occurrence audit on %s:\n%s", dataset_name(a, b), frame.to_string(index=False))
    return curves


def _mean_acc(frame: pd.DataFrame, method: str, a: float, b: float) -> Optional[float]:
    rows = filter_results(frame, methods=[method], datasets=[(a, b)])
    return float(rows["test_acc"].mean()) if not rows.empty else None


def evaluate_acceptance(
    results: pd.DataFrame,
    curves: Optional[Dict[str, pd.DataFrame]] = None,
    oracle_records: Optional[List[CheckRecord]] = None,
) -> List[CheckRecord]:
    """
    Pass/fail records for the reproduction margins that the results can decide.

    Criteria whose runs are missing from ``results`` are skipped.
    The co-occurrence check reads the ``assistant`` rows of the audit.
    """
    records = list(oracle_records or [])
    main = results[results["kind"] == "main"] if not results.empty else results

    def margin(name: str, a: float, b: float, floor: Optional[float], rivals: Dict[str, float]):
        gala = _mean_acc(main, "gala", a, b)
        others = {m: _mean_acc(main, m, a, b) for m in rivals}
        if gala is None or any(v is None for v in others.values()):
            logger.info("Skipping acceptance check %s: runs missing", name)
            return
        failures = []
        if floor is not None and gala < floor:
            failures.append(f"gala {gala:.3f} < {floor}")
        for method, needed in rivals.items():
            gap = gala - others[method]
            if needed >= 0 and gap < needed:
                failures.append(f"gala - {method} = {gap:.3f} < {needed}")
            if needed < 0 and abs(gap) > -needed:
                failures.append(f"|gala - {method}| = {abs(gap):.3f} > {-needed}")
        detail = "; ".join(failures) or f"gala {gala:.3f} vs " + ", ".join(f"{m} {v:.3f}" for m, v in others.items())
        records.append(CheckRecord(name, not failures, detail, {"gala": gala, **others}))

    # positive margin: gala must lead by it; negative margin: gala must stay within it
    margin("trend_0.7_0.9", 0.7, 0.9, 0.62, {"erm": 0.08, "ciga_contrast": 0.08})
    margin("trend_0.8_0.9", 0.8, 0.9, 0.65, {"ciga_contrast": 0.08})
    margin("trend_0.8_0.6", 0.8, 0.6, None, {"ciga_contrast": -0.03, "oracle_groundtruth": -0.06})
    margin("trend_0.8_0.7", 0.8, 0.7, None, {"ciga_contrast": -0.03, "oracle_groundtruth": -0.06})

    curve = (curves or {}).get(dataset_name(0.7, 0.9))
    if curve is not None and "source" in curve.columns:
        curve = curve[curve["source"] == "assistant"]
    if curve is not None and len(curve) == 2:
        pos, neg = curve.set_index("cell").loc["positive"], curve.set_index("cell").loc["negative"]
        spurious_gap = abs(pos["spurious"] - neg["spurious"])
        invariant_gap = abs(pos["invariant"] - neg["invariant"])
        ok = spurious_gap >= 0.9 and invariant_gap <= 0.05
        records.append(CheckRecord(
            "cooccurrence_split", bool(ok),
            f"spurious gap {spurious_gap:.3f}, invariant gap {invariant_gap:.3f}",
            {"spurious_gap": float(spurious_gap), "invariant_gap": float(invariant_gap)},
        ))

    if not results.empty:
        penalty = sweep_table(results[results["kind"] == "sweep_penalty"], "penalty_weight")
        upsample = sweep_table(results[results["kind"] == "sweep_upsample"], "upsample_k")
        positive = penalty[penalty["penalty_weight"] > 0]
        if not positive.empty:
            spread = float(positive["mean"].max() - positive["mean"].min())
            best = float(positive["mean"].max())
            failures = [f"penalty spread {spread:.3f} > 0.12"] if spread > 0.12 else []
            zero = penalty[penalty["penalty_weight"] == 0]
            if not zero.empty and best - float(zero["mean"].iloc[0]) < 0.10:
                failures.append(f"penalty 0 only {best - float(zero['mean'].iloc[0]):.3f} below best")
            once = upsample[upsample["upsample_k"] == 1]
            if not once.empty and best - float(once["mean"].iloc[0]) < 0.10:
                failures.append(f"upsample 1 only {best - float(once['mean'].iloc[0]):.3f} below best")
            records.append(CheckRecord(
                "sensitivity", not failures, "; ".join(failures) or f"spread {spread:.3f}, best {best:.3f}",
                {"spread": spread, "best": best},
            ))
    return records


def write_report(
    results: pd.DataFrame,
    out_dir: Union[str, Path],
    curves: Optional[Dict[str, pd.DataFrame]] = None,
) -> Tuple[pd.DataFrame, Dict[str, pd.DataFrame], Dict[str, Path]]:
    """
    Write summary CSV, per-dataset workbook and figures from a result table.

    Returns:
        Tuple: summary frame, sweep tables and the written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    main = results[results["kind"] == "main"] if not results.empty else results
    summary = summarize_runs(main)
    sweeps = {
        "penalty_weight": sweep_table(results[results["kind"] == "sweep_penalty"], "penalty_weight"),
        "upsample_k": sweep_table(results[results["kind"] == "sweep_upsample"], "upsample_k"),
    }

    paths = {"summary": out_dir / "summary.csv", "workbook": out_dir / "results.xlsx"}
    summary.to_csv(paths["summary"], index=False, float_format="%.6f")
    sheets = {
        dataset_name(a, b): frame.reset_index(drop=True)
        for (a, b), frame in results.groupby(["a", "b"], sort=True)
    } if not results.empty else {"empty": results}
    write_results_workbook(sheets, paths["workbook"])
    for i, figure in enumerate(save_report_figures(summary, out_dir / "figures", sweeps, curves)):
        paths[f"figure_{i}"] = figure
    return summary, sweeps, paths


def _provenance(spec: ExperimentSpec, workers: int) -> Dict[str, object]:
    return {
        "spec": asdict(spec),
        "seeds": list(spec.seeds),
        "workers": workers,
        "dataset_format_version": FORMAT_VERSION,
        "checkpoint_version": CHECKPOINT_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "torch": torch.__version__,
        "torch_geometric": torch_geometric.__version__,
    }


def run_suite(
    spec: ExperimentSpec,
    out_dir: Union[str, Path],
    workers: Optional[int] = None,
    progress: bool = False,
    check_oracle: bool = True,
    audit_per_class: int = COOCCURRENCE_PER_CLASS,
) -> SuiteResult:
    """
    Execute every cell of a spec and write the report.

    Args:
        spec (ExperimentSpec): What to run
        out_dir (Union[str, Path]): Output directory
        workers (Optional[int]): Parallel processes; ``GALA_WORKERS`` or 1 by default
        progress (bool): Show a progress bar over cells
        check_oracle (bool): Include the exact oracle checks in the acceptance records
        audit_per_class (int): Graphs per class for the co-occurrence audit

    Returns:
        SuiteResult: Tables, acceptance records and written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = resolve_workers(workers)
    cells = plan_cells(spec)
    logger.info("Suite %s: %d cells on %d worker(s)", spec.name, len(cells), workers)

    records = _execute(cells, spec, workers, progress)
    results = runs_to_frame(records).sort_values(
        ["kind", "method", "a", "b", "penalty_weight", "upsample_k", "seed"], kind="stable"
    ).reset_index(drop=True)
    failed = int((results["status"] != "ok").sum())
    if failed:
        logger.warning("%d of %d cells failed; see the error column", failed, len(results))

    results_path = out_dir / "results.csv"
    results.to_csv(results_path, index=False, float_format="%.6f")
    curves = cooccurrence_audit(spec.datasets, seed=spec.seeds[0], per_class=audit_per_class, train=spec.train)
    summary, sweeps, paths = write_report(results, out_dir, curves)
    paths["results"] = results_path

    oracle_records = run_verification() if check_oracle else []
    acceptance = evaluate_acceptance(results, curves, oracle_records)
    paths["acceptance"] = out_dir / "acceptance.json"
    paths["acceptance"].write_text(
        json.dumps([asdict(r) for r in acceptance], indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )
    paths["provenance"] = out_dir / "provenance.json"
    paths["provenance"].write_text(
        json.dumps(_provenance(spec, workers), indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )
    return SuiteResult(results, summary, sweeps, curves, acceptance, paths)
