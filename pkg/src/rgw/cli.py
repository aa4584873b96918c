"""``rgw`` command line: run verification suites and write CSV/JSON reports.

Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, load_config
from .suites import SUITES, CheckRow, run_suite

COLUMNS = ("suite", "check-id", "anchor", "value", "threshold", "pass")
REPORT_SCHEMA = "rgw-report/1"
SHORTCUTS = ("rgstep", "walk", "counterterm", "ptheory", "twopoint", "polymer")


def fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return f"{float(v):.17g}"


def report_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r.suite, r.check_id, r.anchor, fmt(r.value), fmt(r.threshold), fmt(r.passed)])
    return buf.getvalue()


def _num(v):
    s = fmt(v)
    return json.dumps(s) if s in ("inf", "-inf", "nan") else s


def report_json(rows):
    """JSON with numbers printed at 17 significant digits and a fixed key order."""
    items = []
    for r in rows:
        items.append("    {" + ", ".join([
            f'"suite": {json.dumps(r.suite)}', f'"check-id": {json.dumps(r.check_id)}',
            f'"anchor": {json.dumps(r.anchor)}', f'"value": {_num(r.value)}',
            f'"threshold": {_num(r.threshold)}', f'"pass": {fmt(r.passed)}']) + "}")
    body = ",\n".join(items)
    return (f'{{\n  "schema": "{REPORT_SCHEMA}",\n  "rows": [\n{body}\n  ]\n}}\n' if items
            else f'{{\n  "schema": "{REPORT_SCHEMA}",\n  "rows": []\n}}\n')


def rows_from_json(text):
    doc = json.loads(text)
    out = []
    for d in doc["rows"]:
        out.append(CheckRow(d["suite"], d["check-id"], d["anchor"], float(d["value"]),
                            float(d["threshold"]), bool(d["pass"])))
    return out


def emit_report(rows, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = (os.path.join(out_dir, "report.csv"), os.path.join(out_dir, "report.json"))
    with open(paths[0], "w") as fh:
        fh.write(report_csv(rows))
    with open(paths[1], "w") as fh:
        fh.write(report_json(rows))
    return paths


def _job(args):
    name, doc, kw = args
    from .config import WorkbenchConfig
    return run_suite(name, WorkbenchConfig(doc), **kw)


def run_suites(names, cfg, parallel=1, max_len=None):
    jobs = [(n, cfg.doc, {"max_len": max_len} if n == "walk" and max_len is not None else {})
            for n in names]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    return [r for rows in results for r in rows]


def build_parser():
    p = argparse.ArgumentParser(prog="rgw", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (merged over the shipped defaults)")
        sp.add_argument("--out", default="rgw-report", help="report directory (default: rgw-report)")
        sp.add_argument("--seed", type=int, help="override seeds.base")
        sp.add_argument("--parallel", type=int, default=1, help="worker processes across suites")
        sp.add_argument("--max-len", type=int, dest="max_len",
                        help="largest walk length n in the walk suite (default 6)")

    run = sub.add_parser("run", help="run a suite or all suites")
    run.add_argument("suite", help=f"one of: {', '.join(SUITES)}, all")
    common(run)
    for name in SHORTCUTS:
        common(sub.add_parser(name, help=f"run the {name} suite"))
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    suite = args.suite if args.command == "run" else args.command
    if suite != "all" and suite not in SUITES:
        print(f"rgw: unknown suite {suite!r}; choose from {', '.join(SUITES)}, all", file=sys.stderr)
        return 2
    if args.max_len is not None and args.max_len < 0:
        print("rgw: --max-len must be non-negative", file=sys.stderr)
        return 2
    if args.parallel < 1:
        print("rgw: --parallel must be at least 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"rgw: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    names = list(SUITES) if suite == "all" else [suite]
    rows = run_suites(names, cfg, args.parallel, args.max_len)
    try:
        csv_path, _ = emit_report(rows, args.out)
    except OSError as exc:
        print(f"rgw: cannot write report: {exc}", file=sys.stderr)
        return 2
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite:<12} {r.check_id:<28} "
              f"{r.value:.3e} <= {r.threshold:.1e}")
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed; report in {csv_path}")
    return 1 if failed else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
