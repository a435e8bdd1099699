"""Command-line interface: simulation study, estimation on CSV data, and the
identity self-check.

Exit codes: 0 success, 1 self-check failure, 2 usage or data error.  All
numeric output is written with 17 significant digits so reruns at a fixed
seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

from . import __version__
from .estimators import (
    ABS_STANDARDIZED,
    ESTIMATOR_LABELS,
    ESTIMATOR_ORDER,
    ESTIMATORS,
    IDENTITY,
    STREAM_KEYS,
    CovariateSpec,
    Dataset,
    ResamplingConfig,
)
from .numerics import RngStream
from .selfcheck import run_selfcheck
from .simulation import SimConfig, run_simulation

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

_CONFIG_KEYS = {
    "n",
    "reps",
    "seed",
    "scenario",
    "estimators",
    "draws",
    "boot",
    "threads",
    "stabilize",
    "out",
}

SUMMARY_HEADER = [
    "estimator",
    "mean_point",
    "rel_bias_pct",
    "mc_sd",
    "mean_se",
    "mc_error",
    "coverage_pct",
    "n_failed",
    "incomplete",
]


class UsageError(Exception):
    pass


def _num(x):
    """Format a float with 17 significant digits (byte-stable output)."""
    return format(float(x), ".17g")


def _parse_estimators(value):
    if value is None:
        return None
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    tags = [str(t).strip() for t in items if str(t).strip()]
    unknown = [t for t in tags if t not in ESTIMATORS]
    if unknown:
        raise UsageError(
            f"unknown estimators {unknown}; available: {ESTIMATOR_ORDER}"
        )
    return tags


def _load_config_file(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise UsageError(f"config file is not valid JSON: {err}")
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object with flat keys")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _sim_config_from_args(args):
    file_cfg = _load_config_file(args.config) if args.config else {}

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return file_cfg[key]
        return default

    estimators = _parse_estimators(pick(args.estimators, "estimators", None))
    try:
        config = SimConfig(
            n=int(pick(args.n, "n", 500)),
            reps=int(pick(args.reps, "reps", 1000)),
            seed=int(pick(args.seed, "seed", 2024)),
            scenario=str(pick(args.scenario, "scenario", "I")),
            estimators=tuple(estimators) if estimators else tuple(ESTIMATOR_ORDER),
            n_draws=int(pick(args.draws, "draws", 200)),
            n_boot=int(pick(args.boot, "boot", 200)),
            stabilize=bool(pick(None, "stabilize", True)),
            threads=int(pick(args.threads, "threads", 1)),
        )
    except ValueError as err:
        raise UsageError(str(err))
    out_dir = Path(pick(args.out, "out", "."))
    return config, out_dir


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _summary_rows(rows):
    out = []
    for row in rows:
        out.append(
            [
                row.estimator,
                _num(row.mean_point),
                _num(row.rel_bias_pct),
                _num(row.mc_sd),
                _num(row.mean_se),
                _num(row.mc_error),
                _num(row.coverage_pct),
                str(row.n_failed),
                "1" if row.incomplete else "0",
            ]
        )
    return out


def _text_table(rows):
    header = ["Estimator", "Point", "Bias %", "SD", "SE", "MC err", "Cover %", "Fail"]
    body = []
    for row in rows:
        body.append(
            [
                ESTIMATOR_LABELS.get(row.estimator, row.estimator),
                f"{row.mean_point:.3f}",
                f"{row.rel_bias_pct:+.1f}",
                f"{row.mc_sd:.3f}",
                f"{row.mean_se:.3f}",
                f"{row.mc_error:.3f}",
                f"{row.coverage_pct:.1f}",
                str(row.n_failed),
            ]
        )
    widths = [max(len(r[j]) for r in [header, *body]) for j in range(len(header))]
    lines = []
    for r in [header, *body]:
        lines.append(
            "  ".join(
                r[j].ljust(widths[j]) if j == 0 else r[j].rjust(widths[j])
                for j in range(len(header))
            )
        )
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def cmd_simulate(args):
    config, out_dir = _sim_config_from_args(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_simulation(config)

    rep_rows = [
        [
            str(rec.rep),
            rec.estimator,
            _num(rec.point),
            _num(rec.se),
            "1" if rec.covered else "0",
        ]
        for rec in result.records
    ]
    _write_csv(
        out_dir / "replications.csv",
        ["rep", "estimator", "point", "se", "covered"],
        rep_rows,
    )
    _write_csv(out_dir / "summary.csv", SUMMARY_HEADER, _summary_rows(result.rows))

    failure_counts = {row.estimator: row.n_failed for row in result.rows}
    warnings = [
        f"{tag}: {count} failed replications"
        for tag, count in failure_counts.items()
        if count
    ]
    manifest = {
        "tool": "drbayes",
        "version": __version__,
        "command": "simulate",
        "config": {
            "n": config.n,
            "reps": config.reps,
            "seed": config.seed,
            "scenario": config.scenario,
            "estimators": list(config.estimators),
            "draws": config.n_draws,
            "boot": config.n_boot,
            "stabilize": config.stabilize,
            "threads": config.threads,
        },
        "mc_error_batches": result.mc_error_batches,
        "mc_error_batch_rule": "floor(sqrt(reps))",
        "elapsed_seconds": result.elapsed_seconds,
        "estimator_failures": failure_counts,
        "warnings": warnings,
        "outputs": ["replications.csv", "summary.csv"],
        "reproducibility": "outputs are a pure function of config (any thread count)",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    print(f"scenario {config.scenario}, n={config.n}, reps={config.reps}, seed={config.seed}")
    print(_text_table(result.rows))
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return EXIT_OK


def _parse_col_spec(value, what):
    """Parse 'a,b,abs:c' into ((name, transform), ...)."""
    cols = []
    if value:
        for token in value.split(","):
            token = token.strip()
            if not token:
                continue
            if token.startswith("abs:"):
                cols.append((token[4:].strip(), ABS_STANDARDIZED))
            else:
                cols.append((token, IDENTITY))
    for name, _ in cols:
        if not name:
            raise UsageError(f"empty column name in --{what}")
    return cols


def _read_table(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise UsageError(f"{path}: empty file")
            rows = list(reader)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {path}")
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return [name.strip() for name in reader.fieldnames], rows


def _column(rows, name, path):
    values = []
    for i, row in enumerate(rows):
        raw = row.get(name)
        if raw is None or str(raw).strip() == "":
            raise UsageError(f"{path}: missing value for column {name!r} in data row {i + 1}")
        try:
            val = float(raw)
        except ValueError:
            raise UsageError(
                f"{path}: non-numeric value {raw!r} for column {name!r} in data row {i + 1}"
            )
        if math.isnan(val) or math.isinf(val):
            raise UsageError(f"{path}: non-finite value for column {name!r} in data row {i + 1}")
        values.append(val)
    return values


def cmd_estimate(args):
    s_cols = _parse_col_spec(args.s_cols, "s-cols")
    b_cols = _parse_col_spec(args.b_cols, "b-cols")
    tags = _parse_estimators(args.estimators) or list(ESTIMATOR_ORDER)

    fieldnames, rows = _read_table(args.data)
    needed = [args.outcome, args.treatment] + [n for n, _ in s_cols + b_cols]
    missing = [n for n in dict.fromkeys(needed) if n not in fieldnames]
    if missing:
        raise UsageError(f"{args.data}: missing columns {missing}; found {fieldnames}")

    y = _column(rows, args.outcome, args.data)
    z = _column(rows, args.treatment, args.data)
    for i, val in enumerate(z):
        if val not in (0.0, 1.0):
            raise UsageError(
                f"{args.data}: treatment column {args.treatment!r} must be 0/1, "
                f"got {val!r} in data row {i + 1}"
            )

    covariate_names = list(dict.fromkeys(n for n, _ in s_cols + b_cols))
    columns = {name: _column(rows, name, args.data) for name in covariate_names}
    import numpy as np

    if covariate_names:
        x = np.column_stack([columns[n] for n in covariate_names])
    else:
        x = np.empty((len(y), 0))
    try:
        data = Dataset(y=y, z=z, x=x, column_names=tuple(covariate_names))
        spec = CovariateSpec(
            s_columns=tuple((covariate_names.index(n), t) for n, t in s_cols),
            b_columns=tuple((covariate_names.index(n), t) for n, t in b_cols),
        )
        cfg = ResamplingConfig(
            n_draws=args.draws, n_boot=args.boot, stabilize=not args.no_stabilize
        )
    except ValueError as err:
        raise UsageError(f"{args.data}: {err}")

    base = RngStream(args.seed)
    out_rows = []
    for tag in tags:
        try:
            result = ESTIMATORS[tag](data, spec, cfg, base.child(STREAM_KEYS[tag]))
            out_rows.append(
                [
                    tag,
                    _num(result.point),
                    _num(result.se),
                    _num(result.ci[0]),
                    _num(result.ci[1]),
                    json.dumps(result.diagnostics, sort_keys=True),
                ]
            )
        except Exception as err:
            out_rows.append([tag, "nan", "nan", "nan", "nan", json.dumps({"error": f"{type(err).__name__}: {err}"})])

    header = ["method", "point", "se", "ci_low", "ci_high", "diagnostics"]
    if args.out:
        _write_csv(args.out, header, out_rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(out_rows)
    return EXIT_OK


def cmd_selfcheck(args):
    start = time.perf_counter()
    all_passed, results = run_selfcheck()
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        line = f"{status}  {res.name}  (max residual {res.residual:.3e})"
        if not res.passed and res.detail:
            line += f"  [{res.detail}]"
        print(line)
    print(f"{'all checks passed' if all_passed else 'CHECKS FAILED'} "
          f"in {time.perf_counter() - start:.2f}s")
    return EXIT_OK if all_passed else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(
        prog="drbayes",
        description="Doubly robust and Bayesian-bootstrap treatment effect estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the simulation study")
    sim.add_argument("--config", help="JSON config file (flags override)")
    sim.add_argument("--scenario", choices=["I", "II"])
    sim.add_argument("--n", type=int, help="sample size per replication")
    sim.add_argument("--reps", type=int, help="number of replications")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--estimators", help="comma-separated estimator tags")
    sim.add_argument("--draws", type=int, help="posterior draws per estimator")
    sim.add_argument("--boot", type=int, help="bootstrap resamples per estimator")
    sim.add_argument("--threads", type=int, help="worker processes")
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    estp = sub.add_parser("estimate", help="run estimators on a CSV dataset")
    estp.add_argument("--data", required=True, help="CSV file with a header row")
    estp.add_argument("--outcome", required=True, help="outcome column name")
    estp.add_argument("--treatment", required=True, help="binary treatment column name")
    estp.add_argument("--s-cols", default="", help="outcome-model columns, e.g. 'a,b,abs:c'")
    estp.add_argument("--b-cols", default="", help="treatment-model columns")
    estp.add_argument("--estimators", help="comma-separated estimator tags")
    estp.add_argument("--draws", type=int, default=200)
    estp.add_argument("--boot", type=int, default=200)
    estp.add_argument("--seed", type=int, default=2024)
    estp.add_argument("--no-stabilize", action="store_true")
    estp.add_argument("--out", help="output CSV (default: stdout)")
    estp.set_defaults(func=cmd_estimate)

    chk = sub.add_parser("selfcheck", help="run the estimator identity checks")
    chk.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
