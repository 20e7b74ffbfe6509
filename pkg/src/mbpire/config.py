"""Experiment configuration: YAML parsing, validation and default filling."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import EnvironmentModel, build_iid_env, build_markov_env
from .errors import ConfigParseError, ConfigValidationError, MbpireError
from .laws import FiniteLaw, LawTables, MinorizationSpec, validate_tables

DEFAULT_TOLERANCES = {
    "sigmas": 3.0,  # width of every Monte Carlo band, in standard errors
    "alpha": 0.01,  # significance level of KS and chi-square tests
    "kernel_atol": 1e-12,  # pointwise agreement of exact kernels
    "pi_tv": 1e-6,  # TV between the n-step law and pi
    "pi_invariance": 1e-10,  # TV between pi and pi after one more kernel step
    "pi_error": 1e-8,  # largest acceptable certified error on pi(0)
    "kac_rtol": 1e-12,  # reciprocal consistency of the Kac mean
}

DEFAULT_GATE = {"n": 2000, "reps": 200}

# parameters (with defaults) accepted by each experiment kind
EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "validate": {},
    "lyapunov": {"n": 2000, "reps": 200, "kappa": 3.0, "mixing_gaps": 5},
    "rho": {"delta": 1e-10, "reps": 2000},
    "lln": {"n": 1_000_000, "delta": 1e-10, "reps": 2000, "points": 1000},
    "clt": {"n": 10_000, "reps": 2000, "lag_max": 20, "cov_reps": 20_000, "sigma": None, "workers": 1,
            "delta": 1e-10, "rho_reps": 2000},
    "regen": {"n": 1_000_000, "K": 40, "words": 2000},
    "pi": {"K": 40, "words": 2000, "tv_steps": 60, "samples": 20_000, "delta": 1e-10, "kks": False,
           "zero_mass_steps": 3},
    "decompose-check": {"K": 20, "paths": 100_000, "horizon": 5, "l0": 3, "R": 1, "safeguard_n": 100_000},
    "palm-check": {"pattern": {1: None}, "K": 40, "size": 100_000, "delta": 1e-9},
    "tail-check": {"n_max": 10, "reps": 100_000},
}

# experiments that need the subcriticality gate to pass
LONG_HORIZON = {"rho", "lln", "clt", "regen", "pi", "decompose-check", "palm-check", "tail-check"}


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    env: EnvironmentModel
    tables: LawTables
    state_names: list[str]
    minorization: MinorizationSpec | None
    experiments: list[dict[str, Any]]
    tolerances: dict[str, float]
    gate: dict[str, int]
    out: str | None
    raw: dict[str, Any] = field(repr=False)  # normalised config, echoed into the manifest

    def canonical(self, include_seed: bool = True) -> dict[str, Any]:
        c = {k: v for k, v in self.raw.items() if k != "out"}
        if not include_seed:
            c.pop("seed", None)
        return c

    @property
    def config_hash(self) -> str:
        return _hash(self.canonical())

    @property
    def model_hash(self) -> str:
        model = {k: self.raw[k] for k in ("environment", "types", "states", "offspring", "immigration", "minorization")
                 if k in self.raw}
        return _hash(model)


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def parse_yaml(text: str, source: str = "<string>") -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigParseError(f"{where}: {problem}") from None


def _law(spec, d: int, where: str, problems: list[str]) -> FiniteLaw | None:
    """A law is a list of ``[point, probability]`` pairs; scalar points are allowed when d = 1."""
    if not isinstance(spec, list) or not spec:
        problems.append(f"{where}: expected a non-empty list of [point, probability] pairs")
        return None
    pairs = []
    for k, item in enumerate(spec):
        if not (isinstance(item, list) and len(item) == 2):
            problems.append(f"{where}[{k}]: expected [point, probability]")
            return None
        point, prob = item
        point = [point] if isinstance(point, int) and not isinstance(point, bool) else point
        if not isinstance(point, list) or len(point) != d or not all(
                isinstance(c, int) and not isinstance(c, bool) for c in point):
            problems.append(f"{where}[{k}]: point {item[0]!r} is not a vector of {d} integers")
            return None
        if not isinstance(prob, (int, float)) or isinstance(prob, bool):
            problems.append(f"{where}[{k}]: probability {prob!r} is not a number")
            return None
        if not 0 <= prob <= 1:
            problems.append(f"{where}: probability {prob} at point {tuple(point)} is outside [0, 1]")
        pairs.append((tuple(point), float(prob)))
    try:
        law = FiniteLaw.from_pairs(pairs)
    except (ValueError, MbpireError) as exc:
        problems.append(f"{where}: {exc}")
        return None
    problems.extend(str(issue) for issue in law.issues(where) if issue.code != "NegativeProb")
    return law


def _env(spec, problems: list[str]) -> tuple[EnvironmentModel | None, list[str]]:
    if not isinstance(spec, dict):
        problems.append("environment: expected a mapping")
        return None, []
    kind = spec.get("kind")
    states = spec.get("states")
    try:
        if kind == "iid":
            model = build_iid_env(spec.get("weights"))
        elif kind == "markov":
            model = build_markov_env(spec.get("transition"))
        else:
            problems.append(f"environment.kind: {kind!r} is not 'iid' or 'markov'")
            return None, []
    except (MbpireError, TypeError, ValueError) as exc:
        problems.append(f"environment: {exc}")
        return None, []
    S = model.alphabet_size
    if states is None:
        states = [f"s{k}" for k in range(S)]
    if not isinstance(states, list) or len(states) != S or len(set(map(str, states))) != S:
        problems.append(f"environment.states: need {S} distinct names")
        return model, []
    return model, [str(s) for s in states]


def _experiments(spec, problems: list[str]) -> list[dict[str, Any]]:
    if spec is None:
        return []
    if not isinstance(spec, list):
        problems.append("experiments: expected a list")
        return []
    out = []
    for k, item in enumerate(spec):
        if isinstance(item, str):
            item = {"kind": item}
        if not isinstance(item, dict) or "kind" not in item:
            problems.append(f"experiments[{k}]: expected a mapping with a 'kind'")
            continue
        kind = item["kind"]
        if kind not in EXPERIMENT_DEFAULTS:
            problems.append(f"experiments[{k}]: unknown kind {kind!r}")
            continue
        params = copy.deepcopy(EXPERIMENT_DEFAULTS[kind])
        for key, val in item.items():
            if key == "kind":
                continue
            if key not in params:
                problems.append(f"experiments[{k}] ({kind}): unknown parameter {key!r}")
                continue
            default = params[key]
            if isinstance(default, (int, float)) and not isinstance(default, bool) and (
                    not isinstance(val, (int, float)) or isinstance(val, bool) or val <= 0):
                problems.append(f"experiments[{k}] ({kind}): {key} must be a positive number")
                continue
            params[key] = val
        if kind == "palm-check":
            pat = params["pattern"]
            if not isinstance(pat, dict) or not pat or not all(isinstance(t, int) and t >= 1 for t in pat):
                problems.append(f"experiments[{k}] (palm-check): pattern must map times >= 1 to vectors")
        out.append({"kind": kind, **params})
    return out


def build_config(data: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{source}: top level must be a mapping"])
    problems: list[str] = []
    known = {"name", "seed", "environment", "types", "offspring", "immigration", "minorization",
             "experiments", "tolerances", "gate", "out"}
    problems += [f"unknown top-level key {k!r}" for k in data if k not in known]

    seed = data.get("seed")
    if seed is None:
        problems.append("seed: missing (every run must be reproducible)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("seed: must be a non-negative integer")

    d = data.get("types", 1)
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        problems.append("types: must be a positive integer")
        d = 1

    model, names = _env(data.get("environment"), problems)
    tables = None
    if names:
        offspring, immigration = [], []
        off = data.get("offspring") or {}
        imm = data.get("immigration") or {}
        for s in names:
            laws = off.get(s) if isinstance(off, dict) else None
            if not isinstance(laws, list) or len(laws) != d:
                problems.append(f"offspring[{s}]: expected {d} laws (one per parent type)")
                laws = [None] * d
            offspring.append([_law(l, d, f"offspring[{s}][{i}]", problems) if l is not None else None
                              for i, l in enumerate(laws)])
            q = imm.get(s) if isinstance(imm, dict) else None
            if q is None:
                problems.append(f"immigration[{s}]: missing")
            immigration.append(_law(q, d, f"immigration[{s}]", problems) if q is not None else None)
        if not problems:
            tables = LawTables.from_lists(offspring, immigration)
            problems += [str(i) for i in validate_tables(tables)]

    minor = None
    if data.get("minorization") is not None:
        m = data["minorization"]
        try:
            eps = float(m["epsilon"])
            mo = [_law(l, d, f"minorization.offspring[{i}]", problems) for i, l in enumerate(m["offspring"])]
            mi = _law(m["immigration"], d, "minorization.immigration", problems)
            if None not in mo and mi is not None:
                minor = MinorizationSpec(eps, tuple(mo), mi)
        except (KeyError, TypeError, ValueError, MbpireError) as exc:
            problems.append(f"minorization: {exc}")

    tol = dict(DEFAULT_TOLERANCES)
    for k, v in (data.get("tolerances") or {}).items():
        if k not in tol:
            problems.append(f"tolerances: unknown tolerance {k!r}")
        elif not isinstance(v, (int, float)) or v <= 0:
            problems.append(f"tolerances.{k}: must be positive")
        else:
            tol[k] = float(v)
    gate = dict(DEFAULT_GATE)
    for k, v in (data.get("gate") or {}).items():
        if k not in gate or not isinstance(v, int) or v < 1:
            problems.append(f"gate.{k}: unknown key or non-positive integer")
        else:
            gate[k] = v
    experiments = _experiments(data.get("experiments"), problems)
    if any(e["kind"] == "decompose-check" for e in experiments) and data.get("minorization") is None:
        problems.append("decompose-check needs a minorization section")
    if problems:
        raise ConfigValidationError(problems)

    for e in experiments:  # a default pattern asks for the zero vector at time 1
        if e["kind"] == "palm-check":
            e["pattern"] = {int(t): ([0] * d if v is None else ([v] if isinstance(v, int) else list(v)))
                            for t, v in e["pattern"].items()}
    raw = {
        "name": str(data.get("name", Path(source).stem)),
        "seed": seed,
        "environment": data["environment"] | {"states": names},
        "types": d,
        "offspring": data["offspring"],
        "immigration": data["immigration"],
        "minorization": data.get("minorization"),
        "experiments": [e | ({"pattern": {str(t): v for t, v in e["pattern"].items()}}
                             if e["kind"] == "palm-check" else {}) for e in experiments],
        "tolerances": tol,
        "gate": gate,
        "out": data.get("out"),
    }
    return ExperimentConfig(raw["name"], seed, model, tables, names, minor, experiments, tol, gate,
                            data.get("out"), raw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"{path}: {exc.strerror}") from None
    return build_config(parse_yaml(text, str(path)), str(path))


def bundled_dir() -> Path:
    return Path(__file__).parent / "configs"


def bundled(name: str) -> Path:
    """Path of a bundled config by name (``cfg-bern`` etc.)."""
    p = bundled_dir() / f"{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no bundled config {name!r}; have {sorted(x.stem for x in bundled_dir().glob('*.yaml'))}")
    return p
