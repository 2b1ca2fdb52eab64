"""Command-line harness.

``fedprotoid run <config>`` writes ``report.jsonl`` (one line per round) and
``summary.json`` into the configured output directory.
``fedprotoid sweep <config> --axis <name> --values a,b,...`` runs one
experiment per value on shared synthetic data and writes
``sweep_<axis>.csv`` next to the per-value reports.

Exit status: 0 on success, 1 on a runtime failure, 2 on a configuration
error. Set ``FEDPROTOID_LOG_LEVEL`` (e.g. ``INFO``) for progress logs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .federation import FederationResult, run_federation
from .synthgen import SyntheticDomains, generate

log = logging.getLogger("fedprotoid")

LOG_ENV = "FEDPROTOID_LOG_LEVEL"
AXES = ("kernel", "proto_fraction", "transmit", "mmd_mode")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CSV_HEADER = ("value", "best_map", "best_rank1", "best_round", "total_bytes")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def summarize(result: FederationResult) -> Dict:
    """Best mAP and Rank-1 over rounds, and the first round reaching that mAP."""
    rounds = [{"round": r.round, "map": r.map, "rank1": r.rank1} for r in result.reports]
    scored = [r for r in result.reports if r.map is not None]
    best = max(scored, key=lambda r: r.map, default=None)
    return {
        "best_map": None if best is None else best.map,
        "best_rank1": max((r.rank1 for r in scored), default=None),
        "best_round": None if best is None else best.round,
        "initial_map": result.initial_map,
        "initial_rank1": result.initial_rank1,
        "total_uploaded_bytes": result.ledger.total_uploaded,
        "total_downloaded_bytes": result.ledger.total_downloaded,
        "rounds": rounds,
    }


def execute(cfg: ExperimentConfig, out_dir: Path,
            data: Optional[SyntheticDomains] = None) -> Dict:
    """Run one experiment and write its report files; returns the summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.jsonl"
    with report_path.open("w") as fh:
        result = run_federation(
            cfg, data, on_round=lambda r: fh.write(_dumps(r.to_dict()) + "\n")
        )
    summary = summarize(result)
    (out_dir / "summary.json").write_text(_dumps(summary) + "\n")
    return summary


def parse_values(axis: str, raw: str) -> List:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError(axis, "no sweep values given")
    if axis == "proto_fraction":
        try:
            return [float(v) for v in items]
        except ValueError:
            raise ConfigError(axis, f"values must be numbers, got {raw!r}") from None
    return items


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out_dir: Path) -> List[Dict]:
    """One run per value with the master seed held fixed; writes a CSV table."""
    if axis not in AXES:
        raise ConfigError(axis, f"unknown sweep axis; expected one of {', '.join(AXES)}")
    configs = [cfg.replace(**{axis: v}) for v in values]
    data = generate(cfg.data)
    rows = []
    for value, c in zip(values, configs):
        log.info("sweep %s=%s", axis, value)
        s = execute(c, out_dir / f"{axis}={value}", data)
        rows.append({"value": value, "best_map": s["best_map"], "best_rank1": s["best_rank1"],
                     "best_round": s["best_round"],
                     "total_bytes": s["total_uploaded_bytes"] + s["total_downloaded_bytes"]})
    with (out_dir / f"sweep_{axis}.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprotoid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one federated experiment")
    run_p.add_argument("config", type=Path)
    run_p.add_argument("--out", type=Path, help="override out_dir from the config")
    sw = sub.add_parser("sweep", help="repeat an experiment along one axis")
    sw.add_argument("config", type=Path)
    sw.add_argument("--axis", required=True, choices=AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--out", type=Path, help="override out_dir from the config")
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = load_config(args.config)
        out_dir = args.out or Path(cfg.out_dir)
        values = parse_values(args.axis, args.values) if args.command == "sweep" else None
        if values is not None:
            for v in values:
                cfg.replace(**{args.axis: v})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            s = execute(cfg, out_dir)
            print(f"best mAP {s['best_map']} rank-1 {s['best_rank1']} at round {s['best_round']}")
        else:
            for row in sweep(cfg, args.axis, values, out_dir):
                print(f"{args.axis}={row['value']}: best mAP {row['best_map']}")
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
