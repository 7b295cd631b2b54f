"""grit: prepare data, train, evaluate, sweep and export analyses.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analyze import (group_similarity, membership_timeline, write_matrix_csv,
                      write_matrix_gnuplot, write_timeline_csv)
from .config import RunConfig, build_config, load_config
from .dataio import (FORMATS, DataError, file_fingerprint, five_core_filter, leave_one_out_split,
                     load_dataset, load_log, read_cache_header, save_dataset)
from .evalmetrics import evaluate
from .gritblock import GritModel, load_checkpoint
from .trainer import fit

log = logging.getLogger("grit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_GRID = {
    "kappa": [64, 128, 256],
    "beta": [0.1, 0.3, 0.5, 0.7, 0.9],
    "dropout": [0.1, 0.2, 0.3, 0.4, 0.5],
}

CHECKPOINT_NAME = "checkpoint.grit"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sparsity_pct(stats: dict) -> str:
    # truncated, not rounded, to match the usual dataset tables
    return f"{math.floor(stats['sparsity'] * 10000 + 1e-9) / 100:.2f}"


def print_stats(stats: dict, out=None) -> None:
    out = out or sys.stdout
    print(f"users: {stats['users']}", file=out)
    print(f"items: {stats['items']}", file=out)
    print(f"interactions: {stats['interactions']}", file=out)
    print(f"sparsity: {_sparsity_pct(stats)}%", file=out)


def _parse_sets(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve_config(args, extra: dict | None = None) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    overrides.update(extra or {})
    try:
        return load_config(args.config, overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _load_split(path: str):
    if not path:
        raise UsageError("no dataset given (use --data or set 'data' in the config)")
    if not Path(path).exists():
        raise DataError(f"dataset cache not found: {path}")
    return leave_one_out_split(load_dataset(path))


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    out = Path(args.output)
    src = file_fingerprint(args.input, args.format)
    if out.exists() and not args.force:
        try:
            header = read_cache_header(out)
        except (DataError, ValueError, OSError):
            header = {}
        prev = header.get("source", {})
        if prev.get("sha256") == src["sha256"] and prev.get("format") == src["format"]:
            print(f"{out} is up to date with {args.input}; nothing to do")
            print_stats(header)
            return EXIT_OK
    ds = five_core_filter(load_log(args.input, args.format))
    leave_one_out_split(ds)  # fails early if a sequence is too short
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out, source=src)
    print_stats(ds.stats())
    return EXIT_OK


def train_run(cfg: RunConfig, split=None) -> dict:
    """Train one configuration into ``cfg.out_dir``; returns a summary row."""
    split = split if split is not None else _load_split(cfg.data)
    cfg = replace(cfg, model=replace(cfg.model, n_items=split.n_items))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    model = GritModel(cfg.model, seed=cfg.train.seed)
    res = fit(model, split, cfg.train, log_path=out / "train_log.jsonl",
              checkpoint_path=out / CHECKPOINT_NAME)
    valid = evaluate(model, split, "valid", cfg.train.eval_batch_size, cfg.train.exclude_history_eval)
    test = evaluate(model, split, "test", cfg.train.eval_batch_size, cfg.train.exclude_history_eval)
    test.write(out / "report.json", out / "ranks_test.csv")
    valid.write(out / "report_valid.json")
    row = {
        "out_dir": str(out),
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "valid_recall@10": valid.get("recall", 10),
        "valid_mrr@10": valid.get("mrr", 10),
        "test_recall@10": test.get("recall", 10),
        "test_ndcg@10": test.get("ndcg", 10),
    }
    row["score"] = (row["valid_recall@10"] + row["valid_mrr@10"]) / 2
    log.info("finished %s: best epoch %d, test recall@10 %.4f ndcg@10 %.4f", out,
             res.best_epoch, row["test_recall@10"], row["test_ndcg@10"])
    return row


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    row = train_run(cfg)
    print(json.dumps(row, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, extra = load_checkpoint(args.checkpoint)
    split = _load_split(args.data)
    if split.n_items != model.config.n_items:
        raise DataError(f"checkpoint has {model.config.n_items} items, dataset has {split.n_items}")
    report = evaluate(model, split, args.phase, exclude_history=args.exclude_history)
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"eval_{args.phase}.json", out / f"ranks_{args.phase}.csv")
    print(json.dumps(report.to_json(), indent=2))
    return EXIT_OK


def _grid_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise UsageError(f"grid entry {k!r} must be a non-empty list")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _point_name(point: dict) -> str:
    return "_".join(f"{k}={point[k]}" for k in sorted(point))


def _sweep_one(job):
    cfg_dict, point = job
    cfg = build_config(cfg_dict)
    row = train_run(cfg)
    row.update(point)
    return row


def select_best(rows: list[dict]) -> dict:
    """Highest (valid Recall@10 + valid MRR@10) / 2; ties go to the earlier row."""
    return max(rows, key=lambda r: (r["valid_recall@10"] + r["valid_mrr@10"]) / 2)


def cmd_sweep(args) -> int:
    base = _resolve_config(args)
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read grid {args.grid}: {exc}") from None
    else:
        grid = DEFAULT_GRID
    points = _grid_points(grid)
    root = Path(base.out_dir)
    jobs = []
    for p in points:
        try:
            cfg = build_config({**p, "out_dir": str(root / _point_name(p))}, base)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
        except ValueError as exc:
            raise UsageError(f"bad grid point {p}: {exc}") from None
        jobs.append((cfg.to_dict(), p))
    root.mkdir(parents=True, exist_ok=True)
    base.dump(root / "base_config.json")
    log.info("sweep over %d configurations with %d worker(s)", len(jobs), args.workers)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    keys = sorted(grid)
    cols = ["name"] + keys + ["best_epoch", "epochs_run", "valid_recall@10", "valid_mrr@10", "score",
                              "test_recall@10", "test_ndcg@10", "out_dir"]
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r, (_, p) in zip(rows, jobs):
            w.writerow({"name": _point_name(p), **r})
    best = select_best(rows)
    (root / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(json.dumps(best, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze_groups(args) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    n = len(model.blocks)
    blocks = range(n) if args.block is None else [args.block]
    for b in blocks:
        if not 0 <= b < n:
            raise UsageError(f"--block must lie in [0, {n}), got {b}")
        M = group_similarity(model, b)
        write_matrix_csv(M, out / f"group_similarity_block{b}.csv")
        write_matrix_gnuplot(M, out / f"group_similarity_block{b}.dat")
        print(f"block {b}: {M.shape[0]}x{M.shape[1]} -> {out / f'group_similarity_block{b}.csv'}")
    return EXIT_OK


def cmd_analyze_timeline(args) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    split = _load_split(args.data)
    try:
        tl = membership_timeline(model, args.user, split)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    out = Path(args.output or Path(args.checkpoint).parent / f"timeline_{args.user}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_timeline_csv(tl, out)
    print(f"{len(tl)} timesteps x {tl.shape[1]} groups -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grit", description=__doc__.splitlines()[0])
    verb = p.add_mutually_exclusive_group()
    verb.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verb.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="filter and split a raw interaction log into a cache")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=FORMATS, default="movielens")
    s.add_argument("--output", required=True, help="dataset cache path")
    s.add_argument("--force", action="store_true", help="rebuild even if the cache is current")
    s.set_defaults(func=cmd_prepare)

    def run_opts(s):
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--data", help="dataset cache (overrides the config)")
        s.add_argument("--out-dir", help="run directory (overrides the config)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    s = sub.add_parser("train", help="train one configuration")
    run_opts(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--phase", choices=("valid", "test"), default="test")
    s.add_argument("--exclude-history", action="store_true",
                   help="drop the user's context items from the candidates")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid search, selected by (Recall@10 + MRR@10) / 2 on validation")
    run_opts(s)
    s.add_argument("--grid", help="JSON object mapping config keys to lists of values")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("analyze-groups", help="cosine similarity between group vectors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--block", type=int, help="block index (default: all blocks)")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_analyze_groups)

    s = sub.add_parser("analyze-timeline", help="per-timestep group memberships of one user")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--user", required=True, help="raw user id")
    s.add_argument("--output")
    s.set_defaults(func=cmd_analyze_timeline)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
