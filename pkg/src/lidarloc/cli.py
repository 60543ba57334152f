"""Command-line front end: ``teach``, ``sweep`` and ``report``.

Exit codes: 0 success, 1 configuration error, 2 estimation failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bench import GRAPH_DIR, RESULTS_CSV, run_sweep, run_teach, write_report, write_sweep
from .cloud import FrameFormatError
from .config import ConfigError, RunConfig, load_config
from .evaluation import CsvFormatError
from .icp import InsufficientOverlapError
from .linalg import RankDeficiencyError
from .teach_repeat import GraphIntegrityError, TeachDivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_IO = 0, 1, 2, 3


def _intervals(text):
    try:
        out = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"intervals must be comma-separated integers, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("intervals must be integers >= 1")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="lidarloc", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["teach", "sweep", "report"])
    p.add_argument("--config", help="YAML run configuration (teach and sweep)")
    p.add_argument("--intervals", type=_intervals, help="localization intervals, e.g. 1,2,5,10")
    p.add_argument("--backend", choices=["doppler", "icp", "both"])
    p.add_argument("--seed", type=int, help="simulation seed (overrides the config)")
    p.add_argument("--threads", type=int, help="ICP point-parallel workers (default 10)")
    p.add_argument("--serial-timing", action="store_true",
                   help="run sweep cells one at a time for wall-clock fidelity")
    p.add_argument("--out", help="output directory")
    return p


def _run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config, seed=args.seed)
    if args.intervals:
        cfg.intervals = args.intervals
    if args.backend:
        cfg.backend = args.backend
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.out:
        cfg.out = args.out
    if not cfg.out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return cfg


def cmd_teach(args) -> int:
    cfg = _run_config(args)
    graph = run_teach(cfg)
    graph.save(Path(cfg.out) / GRAPH_DIR)
    print(f"teach: {len(graph.vertices)} vertices written to {Path(cfg.out) / GRAPH_DIR}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    graph_dir = Path(cfg.out) / GRAPH_DIR
    if not (graph_dir / "graph.txt").exists():
        print(f"error: no teach graph in {graph_dir}; run 'lidarloc teach --config ... --out {cfg.out}' first",
              file=sys.stderr)
        return EXIT_IO
    cells = run_sweep(cfg, graph_dir, serial_timing=args.serial_timing)
    write_sweep(cfg.out, cells)
    for c in cells:
        s = c.sweep
        print(f"{s.backend:8s} n={s.n:<4d} runtime {s.runtime_ms:8.2f} ms  rt-ratio {s.rt_ratio:5.3f}  "
              f"lat {s.rmse.lateral:.4f} m  lon {s.rmse.longitudinal:.4f} m  head {s.rmse.heading:.4f} deg")
    print(f"sweep: {len(cells)} rows written to {Path(cfg.out) / RESULTS_CSV}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out
    if not out:
        raise ConfigError("report needs --out (the sweep output directory)")
    text = write_report(Path(out) / RESULTS_CSV, out)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"teach": cmd_teach, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TeachDivergenceError as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (InsufficientOverlapError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (CsvFormatError, FrameFormatError, GraphIntegrityError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
