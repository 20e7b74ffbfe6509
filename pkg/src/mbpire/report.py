"""Byte-stable JSON output and field-wise comparison of reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigParseError, MbpireError


def plain(obj: Any) -> Any:
    """Convert numpy containers and scalars into JSON-ready Python values."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g") if x != int(x) or abs(x) >= 1e17 else format(x, ".1f")


def dumps(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys and every float written with 17 significant digits.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
    """
    obj = plain(obj) if _level == 0 else obj
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return _float(obj)
    return json.dumps(obj)


def write_json(path: Path, obj: Any) -> None:
    path.write_text(dumps(obj) + "\n")


def load_report(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigParseError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


class StructureMismatch(MbpireError):
    """Two reports do not describe the same configuration."""


@dataclass(frozen=True)
class DiffRow:
    path: str
    a: Any
    b: Any
    diff: float | None
    tolerance: float | None
    status: str  # "within", "informational" or "beyond"


def _num(x):
    if isinstance(x, bool) or x is None:
        return None
    if isinstance(x, (int, float)):
        return float(x)
    if x in ("inf", "-inf", "nan"):
        return float(x)
    return None


def _leaves(obj, prefix=""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _leaves(obj[k], f"{prefix}.{k}" if prefix else k)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _leaves(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def _stderr_of(values: dict, key: str):
    if f"{key}_se" in values:
        return values[f"{key}_se"]
    if key != "stderr" and "stderr" in values and not key.endswith("_se"):
        return values["stderr"]
    return None


def _check_rows(path, va: dict, vb: dict, sigmas: float):
    for key in sorted(set(va) | set(vb)):
        a, b = va.get(key), vb.get(key)
        sa, sb = _stderr_of(va, key), _stderr_of(vb, key)
        la, lb = dict(_leaves(a)), dict(_leaves(b))
        lsa, lsb = dict(_leaves(sa)) if sa is not None else {}, dict(_leaves(sb)) if sb is not None else {}
        for sub in sorted(set(la) | set(lb)):
            x, y = la.get(sub), lb.get(sub)
            if x == y:
                continue
            name = f"{path}.{key}{sub if sub.startswith('[') else ('.' + sub if sub else '')}"
            nx, ny = _num(x), _num(y)
            diff = abs(nx - ny) if nx is not None and ny is not None else None
            ex, ey = _num(lsa.get(sub, lsa.get(""))), _num(lsb.get(sub, lsb.get("")))
            if diff is not None and ex is not None and ey is not None:
                tol = sigmas * math.hypot(ex, ey)
                yield DiffRow(name, x, y, diff, tol, "within" if diff <= tol else "beyond")
            else:
                yield DiffRow(name, x, y, diff, None, "informational")


def compare(a: dict, b: dict, sigmas: float = 3.0) -> list[DiffRow]:
    """Differences between two reports of the same model.

    Values inside checks are compared against ``sigmas`` joint standard errors
    when both reports carry them (``<key>_se`` or ``stderr`` siblings); values
    without an error estimate are listed as informational.  Any other field must
    match exactly.
    """
    ca, cb = a.get("config", {}), b.get("config", {})
    if ca.get("model_hash") != cb.get("model_hash") or \
            [e.get("kind") for e in a.get("experiments", [])] != [e.get("kind") for e in b.get("experiments", [])]:
        raise StructureMismatch("reports come from different models or experiment lists")
    rows: list[DiffRow] = []
    for key in sorted(set(a) | set(b) - {"experiments", "config"}):
        if a.get(key) != b.get(key):
            rows.append(DiffRow(key, a.get(key), b.get(key), None, None, "beyond"))
    for key in sorted(set(ca) | set(cb)):
        if ca.get(key) != cb.get(key):
            # seed and hash differences are expected when comparing seeds
            status = "informational" if key in ("seed", "config_hash") else "beyond"
            rows.append(DiffRow(f"config.{key}", ca.get(key), cb.get(key), None, None, status))
    for i, (ea, eb) in enumerate(zip(a.get("experiments", []), b.get("experiments", []))):
        base = f"experiments[{i}]"
        for key in sorted((set(ea) | set(eb)) - {"checks"}):
            if ea.get(key) != eb.get(key):
                status = "informational" if key in ("status", "error") else "beyond"
                rows.append(DiffRow(f"{base}.{key}", ea.get(key), eb.get(key), None, None, status))
        checks_a, checks_b = ea.get("checks", []), eb.get("checks", [])
        if [c["name"] for c in checks_a] != [c["name"] for c in checks_b]:
            rows.append(DiffRow(f"{base}.checks", len(checks_a), len(checks_b), None, None, "beyond"))
            continue
        for ck_a, ck_b in zip(checks_a, checks_b):
            p = f"{base}.{ck_a['name']}"
            if ck_a.get("passed") != ck_b.get("passed"):
                rows.append(DiffRow(f"{p}.passed", ck_a.get("passed"), ck_b.get("passed"), None, None,
                                    "informational"))
            rows.extend(_check_rows(p, ck_a.get("values", {}), ck_b.get("values", {}), sigmas))
    return rows


def format_rows(rows: list[DiffRow]) -> str:
    lines = ["path\ta\tb\tdiff\ttolerance\tstatus"]
    for r in rows:
        lines.append("\t".join(str(v) for v in (r.path, r.a, r.b, r.diff, r.tolerance, r.status)))
    return "\n".join(lines)


def compare_files(path_a: str | Path, path_b: str | Path, sigmas: float = 3.0) -> list[DiffRow]:
    return compare(load_report(path_a), load_report(path_b), sigmas)
