"""Command line: ``validate``, ``run`` and ``compare``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import bundled, load_config
from .errors import ConfigParseError, ConfigValidationError, MbpireError
from .report import StructureMismatch, compare_files, format_rows
from .runner import EXIT_CONFIG, run


def _resolve(path: str) -> Path:
    """A file path, or the name of a bundled config such as ``cfg-bern``."""
    p = Path(path)
    if p.exists() or p.suffix:
        return p
    return bundled(path)


def _load(path: str):
    try:
        return load_config(_resolve(path))
    except FileNotFoundError as exc:
        raise ConfigParseError(str(exc)) from None


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(f"{cfg.name}: valid ({len(cfg.experiments)} experiments, config hash {cfg.config_hash[:12]})")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = args.seed
    res = run(cfg, args.out)
    for e in res.report["experiments"]:
        print(f"[{e['status']:>7}] {e['index']:2d} {e['kind']}" + (f"  {e['error']}" if "error" in e else ""))
    print(f"status {res.report['status']}; artifacts in {res.out}")
    return res.exit_code


def cmd_compare(args) -> int:
    try:
        rows = compare_files(args.a, args.b, args.sigmas)
    except StructureMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if rows:
        print(format_rows(rows))
    return 1 if any(r.status == "beyond" for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbpire", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="parse and validate a config")
    v.add_argument("config", help="config file or bundled name (cfg-bern, cfg-2type, ...)")
    v.set_defaults(func=cmd_validate)
    r = sub.add_parser("run", help="run every experiment of a config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override the master seed")
    r.add_argument("--out", default=None, help="output directory (default: runs/<name>)")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="field-wise diff of two report.json files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--sigmas", type=float, default=3.0)
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigValidationError as exc:
        print("invalid config:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigParseError, MbpireError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
