"""Aggregate metrics CSVs into method-by-corruption tables."""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .adapt import METRICS_COLUMNS
from .errors import SchemaError


def method_of(run_id: str) -> str:
    """Run ids look like ``<method>__<schedule>__seed<k>``."""
    return run_id.split("__", 1)[0]


def read_metrics(text: str, source: str = "<csv>") -> List[dict]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{source}: empty file")
    header = rows[0]
    for i, col in enumerate(METRICS_COLUMNS):
        if i >= len(header):
            raise SchemaError(f"{source}: missing column {col!r}")
        if header[i] != col:
            raise SchemaError(f"{source}: column {i} is {header[i]!r}, expected {col!r}")
    if len(header) > len(METRICS_COLUMNS):
        raise SchemaError(f"{source}: unexpected column {header[len(METRICS_COLUMNS)]!r}")
    out = []
    for n, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(header):
            raise SchemaError(f"{source}: line {n} has {len(r)} fields, expected {len(header)}")
        rec = dict(zip(header, r))
        for col in ("target_error", "mean_entropy", "selected_fraction", "pass_through_ratio", "source_error", "step_wall_time_s"):
            try:
                rec[col] = float(rec[col]) if rec[col] != "" else math.nan
            except ValueError:
                raise SchemaError(f"{source}: line {n} column {col!r} is not a number") from None
        for col in ("severity", "batch_index"):
            try:
                rec[col] = int(rec[col])
            except ValueError:
                raise SchemaError(f"{source}: line {n} column {col!r} is not an integer") from None
        out.append(rec)
    return out


def load_all(paths: Sequence) -> List[dict]:
    """Read and validate every file before returning anything."""
    rows: List[dict] = []
    for p in paths:
        rows.extend(read_metrics(Path(p).read_text(), str(p)))
    return rows


def _segments(rows: List[dict]) -> List[Tuple[str, str, List[dict]]]:
    """Split rows into consecutive (run_id, corruption label) blocks."""
    out: List[Tuple[str, str, List[dict]]] = []
    for r in rows:
        label = f"{r['corruption_kind']}@{r['severity']}"
        if out and out[-1][0] == r["run_id"] and out[-1][1] == label:
            out[-1][2].append(r)
        else:
            out.append((r["run_id"], label, [r]))
    return out


def row_label(run_id: str, schedule: str) -> str:
    return f"{method_of(run_id)} ({schedule})"


def aggregate(rows: List[dict]) -> Tuple[List[str], Dict[str, Dict[str, List[float]]], Dict[str, Dict[str, List[float]]]]:
    """Per method and corruption column: per-run target errors and source errors."""
    columns: "OrderedDict[str, None]" = OrderedDict()
    target: Dict[str, Dict[str, List[float]]] = OrderedDict()
    source: Dict[str, Dict[str, List[float]]] = OrderedDict()
    for run_id, label, block in _segments(rows):
        columns.setdefault(label, None)
        m = row_label(run_id, block[0]["schedule_kind"])
        target.setdefault(m, {}).setdefault(label, []).append(float(np.mean([r["target_error"] for r in block])))
        src = [r["source_error"] for r in block if not math.isnan(r["source_error"])]
        if src:
            source.setdefault(m, {}).setdefault(label, []).append(src[-1])
    return list(columns), target, source


def _cell(vals: List[float]) -> str:
    if not vals:
        return "-"
    mean = 100 * float(np.mean(vals))
    if len(vals) > 1:
        return f"{mean:.2f} ± {100 * float(np.std(vals, ddof=1)):.2f}"
    return f"{mean:.2f}"


def _table(title: str, columns: List[str], data: Dict[str, Dict[str, List[float]]]) -> List[str]:
    lines = [f"**{title}** (error %, mean ± std over runs)", ""]
    lines.append("| Method | " + " | ".join(columns) + " | Mean |")
    lines.append("|---" * (len(columns) + 2) + "|")
    for method, per_col in data.items():
        cells = [_cell(per_col.get(c, [])) for c in columns]
        # Mean column: average over columns, computed per run position.
        col_means = [float(np.mean(per_col[c])) for c in columns if per_col.get(c)]
        mean = f"{100 * float(np.mean(col_means)):.2f}" if col_means else "-"
        lines.append(f"| {method} | " + " | ".join(cells) + f" | {mean} |")
    lines.append("")
    return lines


def format_report(rows: List[dict]) -> str:
    columns, target, source = aggregate(rows)
    lines = _table("Target", columns, target)
    if source:
        lines += _table("Source", columns, source)
    return "\n".join(lines)


def report(paths: Sequence) -> str:
    return format_report(load_all(paths))
