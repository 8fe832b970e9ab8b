import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch_geometric.data import Data

from gala_lab.graph_synth import DatasetSplit, SyntheticGraph
from gala_lab.scm_core import BitRecord

logger = logging.getLogger(__name__)

FORMAT_NAME = "gala-two-piece"
FORMAT_VERSION = 1

PathLike = Union[str, os.PathLike]


class DatasetFormatError(ValueError):
    """Base class for dataset file problems."""


class DatasetCorruptError(DatasetFormatError):
    """The file is truncated, undecodable or fails its checksum."""


class DatasetVersionError(DatasetFormatError):
    """The file was written by an unsupported format version."""


def _graph_record(split_name: str, graph: SyntheticGraph) -> Dict[str, object]:
    return {
        "split": split_name,
        "num_nodes": int(graph.num_nodes),
        "edges": [[int(u), int(v)] for u, v in graph.edges],
        "x": np.asarray(graph.node_features, dtype=np.float64).round(12).tolist(),
        "y": int(graph.label),
        "mask": [bool(m) for m in graph.inv_edge_mask],
        "bits": [int(graph.bits.y), int(graph.bits.c_bit), int(graph.bits.s_bit)],
        "env": int(graph.env_id),
    }


def _graph_from_record(record: Dict[str, object]) -> SyntheticGraph:
    y, c_bit, s_bit = record["bits"]
    return SyntheticGraph(
        num_nodes=int(record["num_nodes"]),
        edges=[(int(u), int(v)) for u, v in record["edges"]],
        node_features=np.asarray(record["x"], dtype=np.float32).reshape(int(record["num_nodes"]), -1),
        label=int(record["y"]),
        inv_edge_mask=[bool(m) for m in record["mask"]],
        bits=BitRecord(int(y), int(c_bit), int(s_bit)),
        env_id=int(record["env"]),
    )


def _dumps(obj: Dict[str, object]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_dataset(split: DatasetSplit, path: PathLike) -> None:
    """
    Write a split as line-delimited JSON: one header line, then one graph per line.

    The header records the format version, strength parameters, seed, the
    per-split graph counts and a SHA-256 digest of the graph lines, so
    identical inputs give identical bytes.

    Args:
        split (DatasetSplit): Dataset to write
        path (PathLike): Destination file
    """
    lines = [
        _dumps(_graph_record(name, graph))
        for name, graphs in split.splits().items()
        for graph in graphs
    ]
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": list(split.params),
        "seed": split.seed,
        "num_classes": split.num_classes,
        "counts": {name: len(graphs) for name, graphs in split.splits().items()},
        "sha256": digest,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(_dumps(header) + "\n")
        for line in lines:
            handle.write(line + "\n")
    logger.info("Wrote %d graphs to %s", len(lines), path)


def load_dataset(path: PathLike) -> DatasetSplit:
    """
    Read a split written by ``serialize_dataset``.

    Args:
        path (PathLike): Dataset file

    Returns:
        DatasetSplit: The stored splits

    Raises:
        DatasetVersionError: If the header names an unsupported version
        DatasetCorruptError: If the file is truncated or fails to decode
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            raw_lines = handle.read().split("\n")
    except UnicodeDecodeError as exc:
        raise DatasetCorruptError(f"{path}: not valid UTF-8 ({exc})") from exc
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise DatasetCorruptError(f"{path} is empty")

    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetCorruptError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetCorruptError(f"{path}: not a {FORMAT_NAME} file")
    version = header.get("version")
    if not isinstance(version, int) or version > FORMAT_VERSION or version < 1:
        raise DatasetVersionError(
            f"{path}: format version {version!r} is not supported (this build reads {FORMAT_VERSION})"
        )

    lines = raw_lines[1:]
    try:
        expected = sum(int(n) for n in header["counts"].values())
        params = tuple(float(p) for p in header["params"])
        seed = int(header["seed"])
        num_classes = int(header.get("num_classes", 3))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DatasetCorruptError(f"{path}: malformed header ({type(exc).__name__}: {exc})") from exc
    if len(lines) != expected:
        raise DatasetCorruptError(f"{path}: expected {expected} graph records, found {len(lines)}")
    if hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest() != header.get("sha256"):
        raise DatasetCorruptError(f"{path}: checksum mismatch")

    splits: Dict[str, List[SyntheticGraph]] = {"train": [], "val": [], "test": []}
    try:
        for line in lines:
            record = json.loads(line)
            splits[record["split"]].append(_graph_from_record(record))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetCorruptError(f"{path}: malformed graph record ({exc})") from exc

    return DatasetSplit(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        params=params,
        seed=seed,
        num_classes=num_classes,
    )


def to_data(graph: SyntheticGraph, index: int = 0) -> Data:
    """
    Convert a graph to a PyG ``Data`` object.

    Each undirected edge ``e`` becomes directed edges ``2e`` (u -> v) and
    ``2e + 1`` (v -> u); ``inv_mask`` follows the same layout.
    """
    if graph.edges:
        pairs = torch.tensor(graph.edges, dtype=torch.long)
        edge_index = torch.stack([pairs, pairs.flip(1)], dim=1).reshape(-1, 2).t().contiguous()
        inv_mask = torch.tensor(graph.inv_edge_mask, dtype=torch.float).repeat_interleave(2)
    else:
        edge_index = torch.empty((2, 0), dtype=torch.long)
        inv_mask = torch.empty(0, dtype=torch.float)
    return Data(
        x=torch.as_tensor(np.asarray(graph.node_features), dtype=torch.float),
        edge_index=edge_index,
        y=torch.tensor([graph.label], dtype=torch.long),
        inv_mask=inv_mask,
        c_bit=torch.tensor([graph.bits.c_bit], dtype=torch.long),
        s_bit=torch.tensor([graph.bits.s_bit], dtype=torch.long),
        sample_idx=torch.tensor([index], dtype=torch.long),
        num_nodes=graph.num_nodes,
    )


def to_data_list(graphs: Sequence[SyntheticGraph]) -> List[Data]:
    return [to_data(graph, i) for i, graph in enumerate(graphs)]


def write_results_workbook(frames: Dict[str, pd.DataFrame], path: PathLike) -> None:
    """
    Write one sheet per dataset into an Excel workbook.

    Args:
        frames (Dict[str, pd.DataFrame]): Sheet name -> table
        path (PathLike): Destination ``.xlsx`` file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for sheet_name, frame in frames.items():
            # Excel caps sheet names at 31 characters
            frame.to_excel(writer, sheet_name=str(sheet_name)[:31], index=False)


def load_results(file_path: PathLike) -> pd.DataFrame:
    """
    Load a results workbook and combine all sheets.

    Args:
        file_path (PathLike): Path to the workbook written by ``write_results_workbook``

    Returns:
        pd.DataFrame: All rows with a ``dataset`` column naming the source sheet
    """
    try:
        excel_file = pd.ExcelFile(file_path, engine="openpyxl")
    except (OSError, ValueError) as exc:
        logger.error("Error loading results from %s: %s", file_path, exc)
        raise

    all_frames = []
    for sheet_name in excel_file.sheet_names:
        frame = pd.read_excel(excel_file, sheet_name=sheet_name)
        frame.columns = frame.columns.str.strip()
        frame["dataset"] = sheet_name
        all_frames.append(frame)

    if all_frames:
        return pd.concat(all_frames, ignore_index=True)
    return pd.DataFrame()
