"""Full-factorial ablation sweeps over adaptation settings."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adapt import AdaptConfig, run_episode
from .network import Model, ParamGroupSelection, reconfigure_activations
from .shiftgen import CorruptionSpec, LabeledBatch, make_stream

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "cell_id",
    "seed",
    "base_lr",
    "batch_size",
    "groups",
    "depth_ratio",
    "granularity",
    "n_act_params",
    "target_error",
    "mean_entropy",
    "selected_fraction",
    "pass_through_ratio",
    "wall_time_s",
    "status",
    "message",
)

AXES = ("base_lr", "batch_size", "groups", "depth_ratio", "granularity")


@dataclass
class SweepGrid:
    base_lr: List[float] = field(default_factory=lambda: [1e-3])
    batch_size: List[int] = field(default_factory=lambda: [64])
    groups: List[str] = field(default_factory=lambda: ["actta_star"])
    depth_ratio: List[float] = field(default_factory=lambda: [1.0])
    granularity: List[str] = field(default_factory=lambda: ["channel"])
    seeds: List[int] = field(default_factory=lambda: [0])

    def cells(self) -> List[dict]:
        axes = [self.seeds] + [getattr(self, a) for a in AXES]
        if any(len(a) == 0 for a in axes):
            raise ValueError("every sweep axis needs at least one value")
        return [dict(zip(("seed",) + AXES, combo)) for combo in itertools.product(*axes)]


@dataclass
class SweepContext:
    """Everything a cell needs besides its grid point."""

    model: Model
    pool: LabeledBatch
    corruption: Optional[CorruptionSpec]
    n_batches: int = 50


def stream_seed(seed: int, batch_size: int) -> int:
    """Stream order depends only on the base seed and batch size.

    Cells that differ in method, LR, depth or granularity therefore see the
    same batches, which keeps comparisons paired.
    """
    return int(np.random.SeedSequence([seed, batch_size]).generate_state(1)[0])


def run_cell(ctx: SweepContext, config: AdaptConfig, cell: dict) -> dict:
    t0 = time.perf_counter()
    row = {k: cell[k] for k in ("seed",) + AXES}
    try:
        model = reconfigure_activations(
            ctx.model, cell["granularity"], cell["depth_ratio"], rows=cell["batch_size"]
        )
        row["n_act_params"] = sum(a.act.count() for a in model.activation_layers())
        cfg = replace(config, base_lr=cell["base_lr"], batch_size=cell["batch_size"], seed=cell["seed"])
        if cell["groups"] == "none":
            model.freeze()
            cfg = replace(cfg, adapt=False)
        else:
            model.set_trainable(ParamGroupSelection.preset(cell["groups"]))
        stream = make_stream(
            ctx.pool, ctx.corruption, cell["batch_size"], ctx.n_batches, stream_seed(cell["seed"], cell["batch_size"])
        )
        m = run_episode(model, stream, cfg, corruption=ctx.corruption)
        row.update(
            target_error=m.target_error,
            mean_entropy=m.mean("mean_entropy"),
            selected_fraction=m.mean("selected_fraction"),
            pass_through_ratio=m.mean("pass_through_ratio"),
            status="ok",
            message="",
        )
        aborted = sum(r.status == "aborted" for r in m.records)
        if aborted:
            row["message"] = f"{aborted} aborted steps"
    except Exception as exc:  # a failing cell must not stop the sweep
        logger.warning("sweep cell %s failed: %s", cell, exc)
        row.setdefault("n_act_params", 0)
        for k in ("target_error", "mean_entropy", "selected_fraction", "pass_through_ratio"):
            row[k] = math.nan
        row.update(status="error", message=f"{type(exc).__name__}: {exc}")
    row["wall_time_s"] = time.perf_counter() - t0
    return row


def sweep(grid: SweepGrid, ctx: SweepContext, config: AdaptConfig, threads: Optional[int] = None) -> List[dict]:
    """Run every grid cell independently; one result row per cell."""
    cells = grid.cells()
    if threads is None:
        threads = int(os.environ.get("ACTTA_THREADS", "1") or 1)
    threads = max(1, min(threads, len(cells)))
    if threads == 1:
        rows = [run_cell(ctx, config, c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda c: run_cell(ctx, config, c), cells))
    for i, r in enumerate(rows):
        r["cell_id"] = i
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def pivot_tables(rows: Sequence[dict]) -> str:
    """One text table per swept axis: mean target error by (groups, value)."""
    out = []
    for axis in AXES:
        values = sorted({r[axis] for r in rows}, key=str)
        if len(values) < 2 and axis != "groups":
            continue
        methods = sorted({r["groups"] for r in rows})
        out.append(f"target error (%) by {axis}")
        header = ["groups"] + [str(v) for v in values]
        lines = [header]
        for m in methods:
            line = [m]
            for v in values:
                errs = [r["target_error"] for r in rows if r["groups"] == m and r[axis] == v and r["status"] == "ok"]
                line.append(f"{100 * np.mean(errs):.2f}" if errs else "-")
            lines.append(line)
        widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
        out.extend("  ".join(c.rjust(w) for c, w in zip(l, widths)) for l in lines)
        out.append("")
    return "\n".join(out)


def grid_from_dict(d: Dict) -> SweepGrid:
    """Build a grid from a parsed grid file, naming the offending entry on error."""
    known = {"base_lr", "batch_size", "groups", "depth_ratio", "granularity", "seeds"}
    if not isinstance(d, dict):
        raise ValueError("grid file must be a mapping of axis name to list of values")
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown grid axis {sorted(unknown)[0]!r}")
    casts = {
        "base_lr": float,
        "batch_size": int,
        "groups": str,
        "depth_ratio": float,
        "granularity": str,
        "seeds": int,
    }
    kwargs = {}
    for k, v in d.items():
        if not isinstance(v, list) or not v:
            raise ValueError(f"grid axis {k!r} must be a non-empty list")
        vals = []
        for i, item in enumerate(v):
            try:
                vals.append(casts[k](item))
            except (TypeError, ValueError):
                raise ValueError(f"grid entry {k}[{i}] = {item!r} is not a valid {casts[k].__name__}") from None
        kwargs[k] = vals
    grid = SweepGrid(**kwargs)
    for i, g in enumerate(grid.groups):
        if g != "none":
            try:
                ParamGroupSelection.preset(g)
            except Exception:
                raise ValueError(f"grid entry groups[{i}] = {g!r} is not a known group preset") from None
    for i, g in enumerate(grid.granularity):
        if g not in ("layer", "channel", "element"):
            raise ValueError(f"grid entry granularity[{i}] = {g!r} must be layer, channel or element")
    for i, r in enumerate(grid.depth_ratio):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"grid entry depth_ratio[{i}] = {r!r} must lie in [0, 1]")
    for i, lr in enumerate(grid.base_lr):
        if lr < 0:
            raise ValueError(f"grid entry base_lr[{i}] = {lr!r} must be >= 0")
    for i, b in enumerate(grid.batch_size):
        if b < 2:
            raise ValueError(f"grid entry batch_size[{i}] = {b!r} must be >= 2")
    return grid
