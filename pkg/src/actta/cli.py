"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import shiftgen
from .activation import BaseActivationKind
from .adapt import evaluate, metrics_csv, run_continual, run_episode
from .config import ExperimentConfig
from .errors import ActtaError, ConfigError, SchemaError
from .network import ParamGroupSelection, build_mlp, load_checkpoint, reconfigure_activations, save_checkpoint
from .report import format_report, load_all, read_metrics
from .sweep import SweepContext, grid_from_dict, pivot_tables, stream_seed, sweep, sweep_csv
from .training import pretrain

logger = logging.getLogger("actta")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _paths(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output_dir)
    return {
        "out": out,
        "train": out / "data" / "train.acds",
        "test": out / "data" / "test.acds",
        "manifest": out / "manifest.json",
        "checkpoint": out / "model.acta",
        "metrics": out / "metrics",
        "sweep": out / "sweep",
    }


def _read_manifest(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def _write_manifest(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _revalidate(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig.from_dict(cfg.to_dict())


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise ConfigError(what, f"{path} does not exist (run the earlier pipeline step first)")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    if args.seed is not None:
        cfg.dataset = replace(cfg.dataset, seed=args.seed)
    cfg = _revalidate(cfg)
    p = _paths(cfg)
    train, test = shiftgen.generate(cfg.dataset)
    p["train"].parent.mkdir(parents=True, exist_ok=True)
    shiftgen.save(train, p["train"], cfg.dataset.n_classes)
    shiftgen.save(test, p["test"], cfg.dataset.n_classes)
    if args.csv:
        (p["train"].with_suffix(".csv")).write_text(shiftgen.to_csv(train))
        (p["test"].with_suffix(".csv")).write_text(shiftgen.to_csv(test))
    (p["out"] / "config.yaml").write_text(cfg.dump())
    manifest = {
        "dataset": cfg.to_dict()["dataset"],
        "files": {k: {"path": str(p[k].relative_to(p["out"])), "sha256": _sha256(p[k])} for k in ("train", "test")},
    }
    _write_manifest(p["manifest"], manifest)
    print(f"wrote {len(train)} train / {len(test)} test samples to {p['train'].parent}")
    return EXIT_OK


def build_model(cfg: ExperimentConfig, batch_size: Optional[int] = None):
    m = cfg.model
    return build_mlp(
        cfg.dataset.dims,
        cfg.dataset.n_classes,
        hidden=m.hidden,
        norm=m.norm,
        base=BaseActivationKind.parse(m.base),
        granularity=m.granularity,
        depth_ratio=m.depth_ratio,
        rows=batch_size or cfg.adapt.batch_size,
        seed=cfg.pretrain.seed,
    )


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    if args.seed is not None:
        cfg.pretrain.seed = args.seed
    if args.epochs is not None:
        cfg.pretrain.epochs = args.epochs
    cfg = _revalidate(cfg)
    p = _paths(cfg)
    _require(p["train"], "dataset")
    _require(p["test"], "dataset")
    train, test = shiftgen.load(p["train"]), shiftgen.load(p["test"])
    model = build_model(cfg)
    pc = cfg.pretrain
    res = pretrain(model, train, epochs=pc.epochs, lr=pc.lr, momentum=pc.momentum, batch_size=pc.batch_size, seed=pc.seed)
    _, test_err = evaluate(model, test.x, test.y)
    save_checkpoint(model, p["checkpoint"])
    manifest = _read_manifest(p["manifest"])
    manifest["checkpoint"] = {
        "path": str(p["checkpoint"].relative_to(p["out"])),
        "sha256": _sha256(p["checkpoint"]),
        "pretrain": cfg.to_dict()["pretrain"],
        "source_train_error": res.train_error,
        "source_test_error": test_err,
    }
    _write_manifest(p["manifest"], manifest)
    print(f"source test accuracy {100 * (1 - test_err):.2f}% after {pc.epochs} epochs -> {p['checkpoint']}")
    return EXIT_OK


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


def run_id_for(groups: str, schedule: str, seed: int) -> str:
    return f"{_safe(groups)}__{schedule}__seed{seed}"


def cmd_adapt(args) -> int:
    cfg = load_config(args)
    a = cfg.adapt
    if args.seed is not None:
        a.seed = args.seed
    for flag, attr in (
        ("schedule", "schedule"),
        ("corruption", "corruption"),
        ("severity", "severity"),
        ("groups", "groups"),
        ("lr", "base_lr"),
        ("batch_size", "batch_size"),
        ("n_batches", "n_batches"),
    ):
        v = getattr(args, flag)
        if v is not None:
            setattr(a, attr, v)
    if args.granularity is not None:
        cfg.model.granularity = args.granularity
    if args.depth_ratio is not None:
        cfg.model.depth_ratio = args.depth_ratio
    cfg = _revalidate(cfg)
    a = cfg.adapt
    p = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else p["checkpoint"]
    _require(ckpt, "checkpoint")
    _require(p["test"], "dataset")

    test = shiftgen.load(p["test"])
    model = load_checkpoint(ckpt)
    if model.in_features != test.x.shape[1]:
        raise ActtaError(f"checkpoint expects {model.in_features} features, dataset has {test.x.shape[1]}")
    model = reconfigure_activations(model, cfg.model.granularity, cfg.model.depth_ratio, rows=a.batch_size)
    if a.groups == "none":
        model.freeze()
    else:
        model.set_trainable(ParamGroupSelection.preset(a.groups))
    config = a.to_adapt_config()
    sseed = stream_seed(a.seed, a.batch_size)

    if a.schedule == "episodic":
        corr = shiftgen.with_scale(a.corruption_spec(), cfg.dataset)
        stream = shiftgen.make_stream(test, corr, a.batch_size, a.n_batches, sseed)
        metrics = run_episode(model, stream, config, corruption=corr)
    else:
        segments = []
        for i, kind in enumerate(a.continual):
            corr = shiftgen.with_scale(a.corruption_spec(kind), cfg.dataset)
            seg_seed = int(np.random.SeedSequence([sseed, i]).generate_state(1)[0])
            segments.append((corr, shiftgen.make_stream(test, corr, a.batch_size, a.n_batches, seg_seed)))
        metrics = run_continual(model, segments, config, source_probe=test)

    run_id = run_id_for(a.groups, a.schedule, a.seed)
    p["metrics"].mkdir(parents=True, exist_ok=True)
    csv_text = metrics_csv(metrics.to_rows(run_id, a.schedule))
    csv_path = p["metrics"] / f"{run_id}.csv"
    csv_path.write_text(csv_text)
    summary = [
        f"run {run_id}",
        f"mean target error: {100 * metrics.target_error:.2f}%",
    ]
    if metrics.segment_source_errors:
        summary.append(f"initial source error: {100 * metrics.initial_source_error:.2f}%")
        summary.append(f"final source error: {100 * metrics.segment_source_errors[-1]:.2f}%")
    summary += ["", format_report(read_metrics(csv_text, str(csv_path)))]
    (p["metrics"] / f"{run_id}.summary.md").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    try:
        grid_raw = yaml.safe_load(Path(args.grid).read_text())
    except OSError as exc:
        raise ConfigError("--grid", f"cannot read {args.grid}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("--grid", f"not valid YAML: {exc}") from None
    try:
        grid = grid_from_dict(grid_raw)
    except ValueError as exc:
        raise ConfigError("--grid", str(exc)) from None
    if args.seed is not None:
        grid.seeds = [args.seed]
    if args.n_batches is not None:
        cfg.adapt.n_batches = args.n_batches
    cfg = _revalidate(cfg)
    p = _paths(cfg)
    _require(p["checkpoint"], "checkpoint")
    _require(p["test"], "dataset")
    test = shiftgen.load(p["test"])
    model = load_checkpoint(p["checkpoint"])
    corr = shiftgen.with_scale(cfg.adapt.corruption_spec(), cfg.dataset)
    ctx = SweepContext(model, test, corr, cfg.adapt.n_batches)
    rows = sweep(grid, ctx, cfg.adapt.to_adapt_config(), threads=args.threads)
    p["sweep"].mkdir(parents=True, exist_ok=True)
    (p["sweep"] / "sweep.csv").write_text(sweep_csv(rows))
    tables = pivot_tables(rows)
    (p["sweep"] / "tables.txt").write_text(tables)
    print(tables)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed -> {p['sweep'] / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = load_all(args.csv)
    except OSError as exc:
        raise ConfigError("csv", f"cannot read {exc.filename}: {exc.strerror}") from None
    text = format_report(rows)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the seed used by this command")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="actta", description="Test-time adaptation with learnable activations")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic source dataset")
    g.add_argument("--csv", action="store_true", help="also write CSV copies")
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="train the source model")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", parents=[common], help="run online adaptation on a corrupted stream")
    a.add_argument("--schedule", choices=["episodic", "continual"])
    a.add_argument("--corruption", choices=list(shiftgen.CORRUPTIONS))
    a.add_argument("--severity", type=int, choices=range(1, 6), metavar="1..5")
    a.add_argument("--groups", help="affine, actta, actta_star, none or custom=g1,g2")
    a.add_argument("--granularity", choices=["layer", "channel", "element"])
    a.add_argument("--depth-ratio", type=float)
    a.add_argument("--lr", type=float, help="base learning rate")
    a.add_argument("--batch-size", type=int)
    a.add_argument("--n-batches", type=int)
    a.add_argument("--checkpoint", help="checkpoint path (default: <out>/model.acta)")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("sweep", parents=[common], help="run an ablation grid")
    s.add_argument("--grid", required=True, help="grid YAML file")
    s.add_argument("--threads", type=int, help="parallel cells (default: $ACTTA_THREADS or 1)")
    s.add_argument("--n-batches", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="aggregate metrics CSVs into tables")
    r.add_argument("csv", nargs="+")
    r.add_argument("--output", help="also write the tables to this file")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ActtaError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
