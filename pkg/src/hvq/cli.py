"""Command line: ``hvq run <config>``, ``hvq validate <config>``, ``hvq version``.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 invalid
configuration, 3 numerical abort (last good snapshot written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import __version__
from .config import load
from .dynamics import NumericalAbort
from .experiments import clean, dumps, run_experiment
from .exprlang import ExpressionError
from .fields import snapshot_bytes

log = logging.getLogger("hvq")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def check_assertions(assertions, metrics: dict) -> list[dict]:
    out = []
    for a in assertions:
        value = metrics.get(a.metric)
        ok = isinstance(value, (int, float)) and math.isfinite(float(value))
        if ok and a.max is not None:
            ok = float(value) <= a.max
        if ok and a.min is not None:
            ok = float(value) >= a.min
        out.append({"metric": a.metric, "value": value, "max": a.max, "min": a.min, "passed": bool(ok)})
    return out


def write_outputs(outdir: Path, files: dict[str, bytes]) -> list[dict]:
    """Write every file and return the manifest, sorted by path."""
    manifest = []
    for rel in sorted(files):
        data = files[rel]
        path = outdir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        manifest.append({"path": rel, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    return manifest


def _outdir(cfg, config_path: Path, override: str | None) -> Path:
    if override:
        return Path(override)
    d = Path(cfg.output.directory)
    return d if d.is_absolute() else config_path.parent / d


def cmd_validate(path: str) -> int:
    try:
        cfg, diags, _ = load(path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for d in diags:
        print(f"{path}: {d}", file=sys.stderr)
    if diags:
        return EXIT_CONFIG
    print(f"{path}: ok ({cfg.experiment})")
    return EXIT_OK


def cmd_run(path: str, out: str | None = None) -> int:
    config_path = Path(path)
    try:
        cfg, diags, text = load(config_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if diags:
        for d in diags:
            print(f"{path}: {d}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = _outdir(cfg, config_path, out)
    outdir.mkdir(parents=True, exist_ok=True)
    echo = json.loads(text)
    t0 = time.perf_counter()
    report = {"artifact": "hvq", "version": __version__, "experiment": cfg.experiment, "config": echo}
    try:
        metrics, files = run_experiment(cfg)
    except NumericalAbort as exc:
        files = {}
        if exc.last_good is not None:
            t, psi = exc.last_good
            files["last_good.bin"] = snapshot_bytes(psi, cfg.numerics.lambda_, t)
        report.update(status="aborted", message=str(exc), manifest=write_outputs(outdir, files))
        report["wall_time_s"] = time.perf_counter() - t0
        (outdir / "report.json").write_bytes(dumps(report))
        where = outdir / "last_good.bin" if files else "none"
        print(f"numerical abort: {exc}; last good snapshot: {where}", file=sys.stderr)
        return EXIT_ABORT
    except (ExpressionError, ValueError) as exc:
        # configuration problems only visible on the grid (domain errors, indefinite metric)
        print(f"{path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    checks = check_assertions(cfg.assertions, metrics)
    passed = all(c["passed"] for c in checks)
    report.update(
        status="ok",
        metrics=metrics,
        checks=checks,
        passed=passed,
        manifest=write_outputs(outdir, files),
        wall_time_s=time.perf_counter() - t0,
    )
    (outdir / "report.json").write_bytes(dumps(report))
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['metric']} = {clean(c['value'])!r}")
    print(f"report: {outdir / 'report.json'}")
    return EXIT_OK if passed else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvq", description="Hidden-variable quantization simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output.directory)")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    sub.add_parser("version", help="print the version")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "version":
        print(f"hvq {__version__}")
        return EXIT_OK
    if args.command == "validate":
        return cmd_validate(args.config)
    return cmd_run(args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
