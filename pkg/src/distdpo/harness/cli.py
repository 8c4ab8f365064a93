"""Command line entry point: ``run``, ``compare`` and ``eval``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from ..net import NetError, load_params
from ..pointcloud import PointCloudError, load_scene_dir
from .compare import DELTA_COLUMNS, SchemaError, compare
from .config import ConfigError, load_config, parse_config
from .runner import RunError, fmt, run, write_csv

log = logging.getLogger("distdpo")


def _print_csv(columns, rows, stream=None):
    w = csv.writer(stream or sys.stdout, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run(cfg, args.out, render=not args.no_figures)
    if res.results:
        _print_csv(list(res.results[0].keys()), res.results)
    log.info("wrote %s (config %s, %.1fs)", res.out, res.config_hash, res.elapsed)
    if cfg.mode == "theory-check" and not all(r["passed"] for r in res.results):
        return 1
    return 0


def cmd_compare(args) -> int:
    deltas = compare(args.a, args.b)
    _print_csv(DELTA_COLUMNS, deltas)
    if args.out:
        write_csv(args.out, DELTA_COLUMNS, deltas)
    if args.figure:
        from .figures import comparison_bars
        comparison_bars(deltas, args.figure)
    return 0


def cmd_eval(args) -> int:
    try:
        params, meta = load_params(args.checkpoint)
    except FileNotFoundError:
        raise RunError(f"checkpoint not found: {args.checkpoint}") from None
    if not os.path.isdir(args.dataset_dir):
        raise RunError(f"dataset directory not found: {args.dataset_dir}")
    if not load_scene_dir(args.dataset_dir):
        raise RunError(f"no <id>_sparse.xyz / <id>_gt.xyz pairs in {args.dataset_dir}")
    sched = meta.get("schedule", {})
    text = "\n".join([
        "[experiment]", "mode = eval", f"seed = {args.seed}", "name = eval",
        "[schedule]", f"T = {sched.get('T', 50)}", f"kind = {sched.get('kind', 'linear')}",
        f"beta_start = {sched.get('beta_start', 1e-4)!r}",
        f"beta_end = {sched.get('beta_end', 2e-2)!r}",
        "[net]", f"hidden = {', '.join(map(str, params.arch.hidden))}",
        f"activation = {params.arch.activation}", f"time_width = {params.arch.time_width}",
        f"time_max_freq = {params.arch.time_max_freq!r}",
        "[eval]", f"nfe = {args.nfe}", f"K = {args.K}", f"checkpoint = {args.checkpoint}",
        f"dataset_dir = {args.dataset_dir}", ""])
    cfg = parse_config(text, "<eval>")
    out = args.out or cfg.output_dir()
    res = run(cfg, out, render=not args.no_figures)
    _print_csv(list(res.results[0].keys()), res.results)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distdpo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="run directory (default: <output root>/<name>)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="metric deltas between two results.csv files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--out", help="also write the delta table to this CSV")
    c.add_argument("--figure", help="render a percentage-change bar chart (PNG)")
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a directory of XYZ scenes")
    e.add_argument("checkpoint")
    e.add_argument("dataset_dir")
    e.add_argument("--nfe", default="1,8", help="comma separated step counts")
    e.add_argument("--K", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, RunError, SchemaError, NetError, PointCloudError) as exc:
        print(f"distdpo: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"distdpo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
