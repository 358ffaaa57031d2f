"""Command-line entry point: ``run``, ``verify`` and ``ess`` subcommands.

Exit codes: 0 success, 1 invalid input, 2 sampling failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from kickkac.config import ConfigError, load_config
from kickkac.diagnostics import EssReport, TraceSummary, histogram_rows

EXIT_OK, EXIT_INVALID, EXIT_SAMPLING, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "KICKKAC_OUT"


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(obj):
    """Replace non-finite floats with None so the JSON stays strict."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def cmd_run(args) -> int:
    from kickkac.experiments import histogram_edges, run_experiment, summarize
    from kickkac.sampler import RejectionCapExceeded, SinkError

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("run.seed", "must be non-negative")
            cfg = cfg.with_overrides(**{"run.seed": args.seed})
    except ConfigError as exc:
        return _fail(EXIT_INVALID, f"invalid config: {exc}")
    out = Path(args.out or os.environ.get(OUT_ENV) or "kickkac_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    trace_path = out / "trace.csv" if cfg["output.trace"] else None
    try:
        result = run_experiment(cfg, trace_path)
    except (RejectionCapExceeded, SinkError, FloatingPointError, ValueError, TypeError,
            ImportError, AttributeError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, RejectionCapExceeded):
            err["stats"] = vars(exc.stats)
        if isinstance(exc, SinkError):
            err["step_index"] = exc.step_index
        _dump(err, out / "error.json")
        code = EXIT_INVALID if isinstance(exc, (ImportError, AttributeError, TypeError)) else EXIT_SAMPLING
        return _fail(code, f"{type(exc).__name__}: {exc}")
    summary = _clean(summarize(result))
    _dump(summary, out / "summary.json")
    edges = histogram_edges(cfg)
    if edges is not None:
        with open(out / "histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x0_lo", "x1_lo", "x0_hi", "x1_hi", "mass"])
            for row in histogram_rows(result.samples, edges):
                w.writerow([repr(v) for v in row])
    ts = summary["trace_summary"]
    print(f"{cfg.experiment}/{cfg.sampler}: {ts['n_steps']} steps, "
          f"teleport fraction {ts['teleport_fraction']:.4f}; outputs in {out}")
    if "mode_weights" in summary:
        print("mode weights: " + ", ".join(f"{v:.4f}" for v in summary["mode_weights"]["weights"]))
    return EXIT_OK


def cmd_verify(args) -> int:
    from kickkac.oracle import ChainValidationError, read_chain_file
    from kickkac.verify import DEFAULT_SEED, check_chain, run_sweep

    if args.sweep_size < 1:
        return _fail(EXIT_INVALID, "--sweep-size must be positive")
    seed = DEFAULT_SEED if args.seed is None else args.seed
    results = []
    if args.chains:
        folder = Path(args.chains)
        files = sorted(folder.glob("*.csv")) if folder.is_dir() else [folder]
        if not files:
            return _fail(EXIT_INVALID, f"no chain files found in {folder}")
        for path in files:
            try:
                chain, C = read_chain_file(path)
            except (ChainValidationError, OSError) as exc:
                return _fail(EXIT_INVALID, f"invalid chain file: {exc}")
            print(f"# {path.name}" + (f" with C={list(C)}" if C else ""))
            part = check_chain(chain, C, path.name, seed)
            for r in part:
                print(r.line())
            results += part
    else:
        results = run_sweep(args.sweep_size, seed)
        for r in results:
            print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


class TraceError(ValueError):
    pass


def read_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a trace CSV into (samples, teleported, accepted); errors carry line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}:1: empty file")
        if header[:3] != ["step", "teleported", "accepted"] or len(header) < 4:
            raise TraceError(f"{path}:1: header must start with step,teleported,accepted,x0")
        width = len(header)
        rows, tele, acc = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise TraceError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                int(row[0])
                t, a = int(row[1]), int(row[2])
                if t not in (0, 1) or a not in (0, 1):
                    raise ValueError("flags must be 0 or 1")
                rows.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            tele.append(bool(t))
            acc.append(bool(a))
    if not rows:
        raise TraceError(f"{path}: trace has no records")
    return np.array(rows), np.array(tele), np.array(acc)


def cmd_ess(args) -> int:
    try:
        samples, tele, acc = read_trace(args.trace)
    except (TraceError, OSError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    density = grad = 0
    seed = None
    if args.summary:
        try:
            prior = json.loads(Path(args.summary).read_text())
            ts = prior["trace_summary"]
            density, grad, seed = ts["density_evals"], ts["grad_evals"], ts.get("seed")
        except (OSError, KeyError, ValueError) as exc:
            return _fail(EXIT_INVALID, f"cannot read summary {args.summary}: {exc}")
    if samples.shape[0] < 100:
        return _fail(EXIT_INVALID, f"trace has {samples.shape[0]} records; ESS needs at least 100")
    n = samples.shape[0]
    ts = TraceSummary.from_flags(tele, acc, density, grad, seed)
    rep = EssReport.from_trace(samples, density / n, grad / n)
    out = {"trace": str(args.trace), "trace_summary": ts.to_json(), "ess": rep.to_json()}
    dest = Path(args.out) if args.out else Path(str(args.trace) + ".ess.json")
    _dump(_clean(out), dest)
    s = rep.summary()["ess"]
    print(f"ESS over {samples.shape[1]} coordinates: mean {s['mean']:.1f}, min {s['min']:.1f}, "
          f"max {s['max']:.1f} (n={n}); written to {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kickkac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a sampler from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./kickkac_out)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="check the finite-state identities")
    v.add_argument("--chains", help="a chain CSV file or a directory of them")
    v.add_argument("--sweep-size", type=int, default=200)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify)
    e = sub.add_parser("ess", help="recompute ESS statistics from a stored trace")
    e.add_argument("--trace", required=True)
    e.add_argument("--summary", help="run summary.json supplying evaluation counts")
    e.add_argument("--out")
    e.set_defaults(func=cmd_ess)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
