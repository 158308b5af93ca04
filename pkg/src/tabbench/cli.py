"""``bench`` command line: run manifests, rank results, export ADTM and one-vs-one data."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from tabbench import hpo, protocol, stats
from tabbench.data import FetchError, fetch_dataset
from tabbench.metrics import adtm_curve, adtm_inputs

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("tabbench")


class UsageError(Exception):
    pass


def _column(method: str, mode: str) -> str:
    return method if mode == "tuned" else f"{method}:default"


def scan_results(results_dir) -> dict:
    """{(dataset, column): [cell dicts sorted by fold]} for every fold file under ``results_dir``."""
    root = Path(results_dir)
    if not root.is_dir():
        raise UsageError(f"results directory {root} does not exist")
    cells = defaultdict(list)
    for path in sorted(root.glob("*/*/*/fold*.json")):
        cell = protocol.read_cell(path)
        if cell is None or "fold_index" not in cell:
            continue
        cells[(cell["dataset"], _column(cell["method"], cell["mode"]))].append(cell)
    for v in cells.values():
        v.sort(key=lambda c: c["fold_index"])
    return dict(cells)


def _mean_ok(cells, key):
    vals = [c[key] for c in cells if c.get("status") == "ok" and c.get(key) is not None]
    return float(np.mean(vals)) if vals else float("nan")


def build_matrix(cells: dict) -> stats.ResultMatrix:
    datasets = sorted({d for d, _ in cells})
    methods = sorted({m for _, m in cells})
    values = np.full((len(datasets), len(methods)), np.nan)
    for (d, m), cs in cells.items():
        values[datasets.index(d), methods.index(m)] = _mean_ok(cs, "test_auc")
    return stats.ResultMatrix(values, datasets, methods)


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"


# ------------------------------------------------------------------ commands

def cmd_run(args) -> int:
    manifest = protocol.RunManifest.load(args.manifest)
    budget = manifest.budget
    if args.max_trials is not None or args.max_hours is not None:
        budget = hpo.Budget(
            args.max_trials if args.max_trials is not None else budget.max_trials,
            args.max_hours * 3600.0 if args.max_hours is not None else budget.max_wall_clock,
        )
    manifest = replace(
        manifest,
        budget=budget,
        parallelism=args.parallelism or manifest.parallelism,
        master_seed=manifest.master_seed if args.seed is None else args.seed,
        out_dir=args.out or manifest.out_dir,
    )
    manifest.validate()

    def progress(result, elapsed):
        auc = result.get("test_auc")
        print(
            f"{result['dataset']}\t{result['method']}\tfold{result['fold_index']}\t"
            f"{'FAILED' if auc is None else f'{auc:.4f}'}\t{elapsed:.1f}s",
            file=sys.stderr,
            flush=True,
        )

    matrix, results = protocol.execute(manifest, progress=progress)
    print(Path(manifest.out_dir) / f"matrix_{manifest.mode}.csv")
    return EXIT_PARTIAL if any(r.n_failed for r in results) else EXIT_OK


def cmd_rank(args) -> int:
    cells = scan_results(args.results)
    matrix = build_matrix(cells)
    if len(matrix.methods) < 2:
        raise UsageError("ranking needs results for at least two methods")
    summary = stats.rank_summary(matrix, args.alpha)
    hours = defaultdict(list)
    for (d, m), cs in sorted(cells.items()):
        hours[m].append(sum(c.get("wall_time_s", 0.0) for c in cs) / 3600.0)
    table = stats.summary_stats(matrix, hours)

    out = Path(args.results)
    _write_text(out / "rank_report.json", protocol.dump_json(summary.to_dict()))
    group_of = {}
    for g, members in enumerate(summary.groups):
        for m in members:
            group_of.setdefault(m, []).append(str(g))
    _write_text(out / "cd_diagram.csv", _csv_text(
        ["method", "rank", "group_id"],
        [[m, repr(float(r)), ";".join(group_of[m])]
         for m, r in sorted(zip(summary.methods, summary.ranks), key=lambda t: (t[1], t[0]))],
    ))
    cols = ["method", "mean_rank", "mean_auc", "median_auc", "mad", "ci_low", "ci_high",
            "mean_hours", "median_hours"]
    rows = []
    for m, s in table.items():
        rows.append([m, s.mean_rank, s.mean_auc, s.median_auc, s.mad, s.ci_low, s.ci_high,
                     s.mean_time, s.median_time])
    rows.sort(key=lambda r: (r[1], r[0]))
    _write_text(out / "summary.csv", _csv_text(cols, [[r[0], *map(repr, r[1:])] for r in rows]))
    width = max(len(c) for c in [*matrix.methods, "method"])
    lines = [f"{'method':<{width}}  " + "  ".join(f"{c:>12}" for c in cols[1:])]
    for r in rows:
        lines.append(f"{r[0]:<{width}}  " + "  ".join(f"{_fmt(v):>12}" for v in r[1:]))
    lines.append("")
    lines.append(f"k={summary.k} N={summary.n} chi2={_fmt(summary.chi2)} p={_fmt(summary.p_value)} "
                 f"CD={summary.cd:.4f} (alpha={summary.alpha})")
    lines.append("groups: " + " | ".join(", ".join(g) for g in summary.groups))
    text = "\n".join(lines) + "\n"
    _write_text(out / "summary.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_adtm(args) -> int:
    cells = scan_results(args.results)
    groups = defaultdict(list)  # method -> AdtmInputs
    for (dataset, column), cs in sorted(cells.items()):
        if ":" in column:
            continue
        for c in cs:
            traj = [t["objective"] for t in c.get("trials", []) if t.get("status") == "complete"]
            if traj:
                groups[column].extend(adtm_inputs([traj]))
    if not groups:
        raise UsageError("no tuned trial histories found")
    rows = []
    for method in sorted(groups):
        curve = adtm_curve(groups[method], args.trials)
        rows += [[t + 1, method, repr(float(v))] for t, v in enumerate(curve)]
    text = _csv_text(["trial", "method", "mean_normalized_distance"], rows)
    _write_text(Path(args.results) / "adtm.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    cells = scan_results(args.results)
    methods = {m for _, m in cells}
    for m in (args.a, args.b):
        if m not in methods:
            raise UsageError(f"unknown method {m!r}; available: {', '.join(sorted(methods))}")
    datasets = sorted({d for d, m in cells if m == args.a} & {d for d, m in cells if m == args.b})
    rows = []
    for d in datasets:
        a, b = cells[(d, args.a)], cells[(d, args.b)]
        rows.append([d, *(repr(_mean_ok(c, "test_error")) for c in (a, b)),
                     *(repr(_mean_ok(c, "test_auc")) for c in (a, b))])
    text = _csv_text(["dataset", "error_rate_A", "error_rate_B", "auc_A", "auc_B"], rows)
    _write_text(Path(args.results) / f"compare_{args.a}_vs_{args.b}.csv".replace(":", "-"), text)
    sys.stdout.write(text)
    return EXIT_OK


def default_cache_dir() -> Path:
    env = os.environ.get("BENCH_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "tabbench"


def cmd_fetch(args) -> int:
    path = fetch_dataset(args.url, args.cache or default_cache_dir())
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute (or resume) a benchmark manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-trials", type=int)
    p.add_argument("--max-hours", type=float)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rank", help="average ranks, Friedman/Nemenyi and summary tables")
    p.add_argument("--results", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("adtm", help="normalized distance-to-maximum curves per method")
    p.add_argument("--results", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_adtm)

    p = sub.add_parser("compare", help="per-dataset error rate / AUC of two methods")
    p.add_argument("--results", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fetch", help="download a dataset once into the cache")
    p.add_argument("--url", required=True)
    p.add_argument("--cache")
    p.set_defaults(func=cmd_fetch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; 2 is reserved for partial failure here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, protocol.ManifestError, hpo.ConfigurationError, stats.InsufficientDataError,
            stats.UnsupportedKError, FetchError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
