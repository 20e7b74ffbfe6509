"""Experiment orchestration: gate first, then every configured experiment in order."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, annealed, limits, oracle, sim, stats
from .config import LONG_HORIZON, ExperimentConfig
from .env import alpha_bound, phi_bound, second_eigenvalue_modulus
from .errors import MbpireError
from .laws import minorization_check, moments
from .limits import Check
from .report import write_json
from .rng import derive

EXIT_PASS, EXIT_FAIL, EXIT_GATE, EXIT_CONFIG = 0, 2, 3, 4

Plot = tuple[list[str], list[list[Any]]]


@dataclass
class Outcome:
    checks: list[Check] = field(default_factory=list)
    plots: dict[str, Plot] = field(default_factory=dict)


def _exact_rho(cfg: ExperimentConfig) -> np.ndarray:
    mom = moments(cfg.tables)
    return annealed.exact_rho(annealed.transfer_operator(cfg.env, mom.M, mom.I))


def _pi(cfg: ExperimentConfig, K: int, words: int, seed, delta: float = 1e-10) -> oracle.PiTable:
    """``pi`` exactly for a constant environment, by averaging over words otherwise."""
    if cfg.env.is_deterministic:
        return oracle.stationary_pi(cfg.tables, [0], K)
    return oracle.stationary_pi_random(cfg.env, cfg.tables, K, words, derive(seed, "pi-words"), delta)


def _pi_zero_error(pt: oracle.PiTable, sigmas: float) -> float:
    se = float(np.ravel(pt.stderr)[0]) if pt.stderr is not None else 0.0
    return pt.error_bound + sigmas * se


def _bernoulli_params(cfg: ExperimentConfig) -> tuple[float, float] | None:
    """``(p, q)`` when the model is one Bernoulli line in a constant environment."""
    if cfg.tables.d != 1 or not cfg.env.is_deterministic:
        return None
    off, imm = cfg.tables.p(0, 0), cfg.tables.q(0)
    if off.support.max() > 1 or imm.support.max() > 1:
        return None
    return off.prob(1), imm.prob(1)


# ---------------------------------------------------------------- experiments


def run_validate(cfg, p, seed, tol) -> Outcome:
    mom = moments(cfg.tables)
    values = {"M": mom.M, "I": mom.I, "states": cfg.state_names, "types": cfg.tables.d}
    if cfg.minorization is not None:
        ok, viol = minorization_check(cfg.tables, cfg.minorization)
        values["minorization"] = ok
        if viol is not None:
            values["minorization_violation"] = str(viol)
        return Outcome([Check("validate", ok, "kernel_atol", values)])
    return Outcome([Check("validate", True, "kernel_atol", values)])


def run_lyapunov(cfg, p, seed, tol) -> Outcome:
    est = limits.lyapunov(cfg.env, cfg.tables, p["n"], p["reps"], derive(seed, "gamma"))
    rate = limits.kappa_rate(cfg.env, cfg.tables, p["kappa"], p["n"], p["reps"], derive(seed, "kappa"))
    gaps = list(range(1, p["mixing_gaps"] + 1))
    checks = [
        Check("lyapunov", est.gate(tol["sigmas"]), "sigmas", {
            "gamma_hat": est.gamma_hat, "stderr": est.stderr, "n": est.n, "reps": est.reps}),
        Check("kappa-rate", None, "sigmas", {"kappa": p["kappa"], "rate": rate, "n": p["n"]}),
        Check("mixing", None, "sigmas", {
            "gap": gaps, "alpha_bound": [alpha_bound(cfg.env, g) for g in gaps],
            "phi_bound": [phi_bound(cfg.env, g) for g in gaps],
            "second_eigenvalue_modulus": second_eigenvalue_modulus(cfg.env)}),
    ]
    return Outcome(checks)


def run_rho(cfg, p, seed, tol) -> Outcome:
    est = limits.rho_series(cfg.env, cfg.tables, p["delta"], p["reps"], derive(seed, "rho"))
    exact = _exact_rho(cfg)
    values = {"value": est.value, "value_se": est.stderr, "terms": est.N, "tail_bound": est.tail_bound,
              "divergent": est.divergent, "exact": exact}
    if est.divergent:
        return Outcome([Check("rho", False, "sigmas", values)])
    band = tol["sigmas"] * est.stderr + est.tail_bound + limits.FLOAT_FLOOR
    ok = bool(np.all(np.abs(est.value - exact) <= band))
    if cfg.env.kind == "iid":
        closed = limits.rho_iid_closed_form(cfg.tables, cfg.env.weights)
        values["closed_form"] = closed
        ok &= bool(np.all(np.abs(est.value - closed) <= band))
    values["band"] = band
    return Outcome([Check("rho", ok, "sigmas", values)])


def run_lln(cfg, p, seed, tol) -> Outcome:
    rho = limits.rho_series(cfg.env, cfg.tables, p["delta"], p["reps"], derive(seed, "rho"))
    traj = sim.simulate(cfg.env, cfg.tables, p["n"], derive(seed, "path"))
    check = limits.lln_check(traj, rho, tol["sigmas"])
    n = traj.n
    idx = np.unique(np.linspace(1, n, min(p["points"], n)).astype(np.int64))
    S = traj.S[idx] / idx[:, None]
    rows = [[int(k), *map(float, s)] for k, s in zip(idx, S)]
    header = ["n"] + [f"S_over_n_{j}" for j in range(cfg.tables.d)]
    return Outcome([check], {"lln_trace": (header, rows)})


def run_clt(cfg, p, seed, tol) -> Outcome:
    rho = _exact_rho(cfg)
    samples = limits.clt_samples(cfg.env, cfg.tables, rho, p["n"], p["reps"], derive(seed, "clt"), p["workers"])
    cov = limits.clt_covariance(cfg.env, cfg.tables, p["lag_max"], p["cov_reps"], derive(seed, "cov"))
    sigma = cov.sigma if p["sigma"] is None else np.atleast_2d(np.asarray(p["sigma"], dtype=float))
    checks = [
        Check("covariance", bool(cov.psd), "sigmas", {
            "sigma": cov.sigma, "sigma_se": cov.stderr, "lag0": cov.lag0, "lag_truncation": cov.lag_truncation,
            "remainder_bound": cov.remainder_bound, "min_eigenvalue": cov.min_eigenvalue}),
        limits.normality_test(samples, sigma, tol["alpha"]),
    ]
    # the sample variance of the replicas must match the covariance estimate
    var = samples.samples.var(axis=0, ddof=1)
    var_se = np.array([stats.variance_se(samples.samples[:, i]) for i in range(cfg.tables.d)])
    diag, diag_se = np.diag(sigma), (np.diag(cov.stderr) if p["sigma"] is None else np.zeros(cfg.tables.d))
    joint = tol["sigmas"] * np.hypot(var_se, diag_se) + (cov.remainder_bound if p["sigma"] is None else 0.0)
    mean = samples.samples.mean(axis=0)
    mean_se = samples.samples.std(axis=0, ddof=1) / math.sqrt(samples.reps)
    checks.append(Check("clt-moments", bool(np.all(np.abs(var - diag) <= joint + limits.FLOAT_FLOOR)
                                            and np.all(np.abs(mean) <= tol["sigmas"] * mean_se + limits.FLOAT_FLOOR)),
                        "sigmas", {"variance": var, "variance_se": var_se, "sigma_diag": diag, "band": joint,
                                   "mean": mean, "mean_se": mean_se}))
    for i in range(cfg.tables.d):
        checks.append(limits.nondegeneracy_check(cfg.env, cfg.tables, i, p["cov_reps"], derive(seed, "nondeg", i),
                                                 tol["sigmas"]))
    plots = {}
    for i in range(cfg.tables.d):
        counts, edges = np.histogram(samples.samples[:, i], bins=40)
        plots[f"clt_hist_{i}"] = (["bin_left", "bin_right", "count"],
                                  [[float(a), float(b), int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)])
    return Outcome(checks, plots)


def run_regen(cfg, p, seed, tol) -> Outcome:
    pt = _pi(cfg, p["K"], p["words"], seed)
    traj = sim.simulate(cfg.env, cfg.tables, p["n"], derive(seed, "path"))
    check = limits.regeneration_check(traj, pt.pi_zero, _pi_zero_error(pt, tol["sigmas"]), tol["sigmas"])
    mu = oracle.kac_mu(pt.pi_zero)
    kac = Check("kac", abs(mu * pt.pi_zero - 1.0) <= tol["kac_rtol"], "kac_rtol",
                {"pi_zero": pt.pi_zero, "kac_mu": mu, "mean_gap": check.values["mean_gap"]})
    gaps = np.diff(sim.regeneration_times(traj.Z))
    g, c = np.unique(gaps, return_counts=True)
    return Outcome([check, kac], {"regen_gaps": (["gap", "count"], [[int(a), int(b)] for a, b in zip(g, c)])})


def run_pi(cfg, p, seed, tol) -> Outcome:
    K, d = p["K"], cfg.tables.d
    checks: list[Check] = []
    plots: dict[str, Plot] = {}
    pt = _pi(cfg, K, p["words"], seed, p["delta"])
    err0 = _pi_zero_error(pt, tol["sigmas"])
    if cfg.env.is_deterministic:
        k = oracle.build_quenched_kernel(cfg.tables, 0, 0, K)
        inv = oracle.tv(pt.pi.ravel() @ k.P, pt.pi)
        checks.append(Check("pi-invariance", inv < tol["pi_invariance"], "pi_invariance",
                            {"tv": inv, "iterations": pt.iterations, "error_bound": pt.error_bound}))
        mu = np.zeros(k.P.shape[0])
        mu[0] = 1.0
        tvs = []
        for _ in range(p["tv_steps"] + 1):
            tvs.append(oracle.tv(mu, pt.pi))
            mu = mu @ k.P
        # nonincreasing up to the certified error of pi itself
        monotone = all(b <= a + 2 * pt.error_bound for a, b in zip(tvs, tvs[1:]))
        checks.append(Check("pi-convergence", tvs[-1] < tol["pi_tv"] and monotone, "pi_tv",
                            {"steps": p["tv_steps"], "tv_final": tvs[-1], "monotone": monotone}))
        plots["pi_tv"] = (["n", "tv"], [[n, t] for n, t in enumerate(tvs)])
        bern = _bernoulli_params(cfg)
        if bern is not None:
            prod = oracle.pi_zero_bernoulli_product(*bern)
            gap = abs(pt.pi_zero - prod)
            checks.append(Check("pi-product", gap <= pt.error_bound + 1e-12 and pt.error_bound < tol["pi_error"],
                                "pi_error", {"pi_zero": pt.pi_zero, "product": prod, "gap": gap,
                                             "error_bound": pt.error_bound}))
    rho = _exact_rho(cfg)
    mean = pt.mean()
    se_mean = pt.mean_stderr if pt.mean_stderr is not None else np.zeros(d)
    mean_band = tol["sigmas"] * se_mean + K * pt.error_bound + 1e-9
    checks.append(Check("pi-mean", bool(np.all(np.abs(mean - rho) <= mean_band)), "sigmas",
                        {"mean": mean, "mean_se": se_mean, "rho": rho, "band": mean_band}))
    samp = sim.stationary_samples(cfg.env, cfg.tables, p["delta"], derive(seed, "stationary"), p["samples"])
    freq = float((~samp.values.any(axis=1)).mean())
    fse = stats.binomial_se(freq, p["samples"])
    band = tol["sigmas"] * fse + err0 + samp.tail_mean_bound
    checks.append(Check("pi-sampler", abs(freq - pt.pi_zero) <= band, "sigmas", {
        "frequency": freq, "frequency_se": fse, "pi_zero": pt.pi_zero, "band": band, "depth": samp.depth_used}))
    mu = oracle.kac_mu(pt.pi_zero)
    checks.append(Check("kac", abs(mu * pt.pi_zero - 1.0) <= tol["kac_rtol"], "kac_rtol",
                        {"pi_zero": pt.pi_zero, "kac_mu": mu}))
    zm = oracle.zero_mass_criterion(cfg.tables, cfg.env, p["zero_mass_steps"], max(K, 1))
    checks.append(Check("zero-mass", None, "kernel_atol", {
        "steps": p["zero_mass_steps"], "holds_some_m": zm.holds_some_m, "holds_one_step": zm.holds_one_step,
        "witness": list(zm.witness) if zm.witness else None,
        "blocking": list(zm.blocking) if zm.blocking else None}))
    if d == 1:
        fit = oracle.geometric_fit_kks(cfg.tables, samp.values[:, 0])
        checks.append(Check("geometric-fit", (fit.pvalue >= tol["alpha"]) if p["kks"] else None, "alpha", {
            "parameter": fit.parameter, "statistic": fit.statistic, "pvalue": fit.pvalue, "bins": fit.bins}))
    states = oracle.box_states(K, d)
    flat = pt.pi.ravel()
    keep = flat > 1e-15
    plots["pi_table"] = ([f"z{j}" for j in range(d)] + ["probability"],
                         [[*map(int, s), float(v)] for s, v in zip(states[keep], flat[keep])])
    return Outcome(checks, plots)


def run_decompose(cfg, p, seed, tol) -> Outcome:
    spec = cfg.minorization
    S = cfg.env.alphabet_size
    worst = 0.0
    for a in range(S):
        for b in range(S):
            if cfg.env.transition[a, b] > 0:
                plain = oracle.build_quenched_kernel(cfg.tables, b, a, p["K"])
                coin = oracle.build_decomposed_kernel(cfg.tables, spec, b, a, p["K"])
                worst = max(worst, float(np.abs(plain.P - coin.P).max()))
    checks = [Check("kernel-equality", worst <= tol["kernel_atol"], "kernel_atol", {"max_abs_diff": worst})]
    h = p["horizon"]
    plain_paths = sim.simulate_batch(cfg.env, cfg.tables, h, p["paths"], derive(seed, "plain"))
    coin_paths = sim.decomposed_batch(cfg.env, cfg.tables, spec, h, p["paths"], derive(seed, "coin"))
    stat, pval, cats = stats.two_sample_chi2(plain_paths.reshape(p["paths"], -1), coin_paths.reshape(p["paths"], -1))
    checks.append(Check("path-law", pval >= tol["alpha"], "alpha",
                        {"statistic": stat, "pvalue": pval, "categories": cats, "paths": p["paths"], "horizon": h}))
    trace = sim.decomposed_simulate(cfg.env, cfg.tables, spec, p["safeguard_n"], derive(seed, "safeguard"))
    sg = sim.safeguard_count(trace, p["l0"], p["R"])
    checks.append(Check("safeguards", None, "sigmas", {
        "count": sg.count, "eligible": sg.eligible, "frequency": sg.frequency,
        "frequency_se": sg.ci_halfwidth / 3.0, "per_time": sg.per_time, "l0": p["l0"], "R": p["R"]}))
    return Outcome(checks)


def run_palm(cfg, p, seed, tol) -> Outcome:
    pattern = {int(t): v for t, v in p["pattern"].items()}
    zm = oracle.zero_mass_criterion(cfg.tables, cfg.env, 1, max(p["K"], 1))
    pc = oracle.palm_identity_check(cfg.env, cfg.tables, pattern, p["K"], p["size"], derive(seed, "palm"),
                                    p["delta"], tol["sigmas"])
    values = {"palm": pc.palm, "palm_se": pc.palm_se, "weighted": pc.weighted, "weighted_se": pc.weighted_se,
              "pi_zero": pc.pi_zero, "zero_weight_fraction": pc.zero_weight_fraction,
              "conditioned": pc.conditioned, "one_step_zero_mass": zm.holds_one_step}
    # the two measures are only equivalent when every environment allows extinction in one step
    checks = [Check("palm", bool(pc.passed) if zm.holds_one_step else None, "sigmas", values)]
    if cfg.env.is_deterministic:
        exact = oracle.pattern_probability(cfg.tables, [0], p["K"], pattern)
        s = tol["sigmas"]
        ok = abs(pc.palm - exact) <= s * pc.palm_se + 1e-12 and abs(pc.weighted - exact) <= s * pc.weighted_se + 1e-12
        checks.append(Check("palm-kernel", ok, "sigmas", {"exact": exact, "palm": pc.palm, "palm_se": pc.palm_se,
                                                          "weighted": pc.weighted, "weighted_se": pc.weighted_se}))
    return Outcome(checks)


def run_tail(cfg, p, seed, tol) -> Outcome:
    check = limits.extinction_tail_check(cfg.env, cfg.tables, p["n_max"], p["reps"], derive(seed, "tail"),
                                         tol["sigmas"])
    v = check.values
    rows = [[n, e, b] for n, e, b in zip(v["n"], v["empirical"], v["bound"])]
    return Outcome([check], {"survival": (["n", "empirical", "bound"], rows)})


RUNNERS: dict[str, Callable[..., Outcome]] = {
    "validate": run_validate,
    "lyapunov": run_lyapunov,
    "rho": run_rho,
    "lln": run_lln,
    "clt": run_clt,
    "regen": run_regen,
    "pi": run_pi,
    "decompose-check": run_decompose,
    "palm-check": run_palm,
    "tail-check": run_tail,
}


# ---------------------------------------------------------------- orchestration


def _write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(x, ".17g") if isinstance(x, float) else x for x in row])


def _summary_value(check: Check):
    for key in ("deviation", "gamma_hat", "sigma", "alpha_bound", "empirical", "pvalue", "statistic", "frequency", "max_abs_diff", "tv_final",
                "palm", "gap", "tv", "value", "mean", "kac_mu", "rate"):
        if key in check.values:
            v = check.values[key]
            return key, v
    return "", ""


@dataclass
class RunResult:
    exit_code: int
    report: dict
    manifest: dict
    out: Path


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> RunResult:
    """Run the gate and then each experiment, writing ``report.json``,
    ``summary.csv``, ``plots/*.csv`` and ``manifest.json`` into ``out``."""
    out = Path(out or cfg.out or Path("runs") / cfg.name)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    tol = cfg.tolerances
    t0 = time.perf_counter()
    gate = limits.lyapunov(cfg.env, cfg.tables, cfg.gate["n"], cfg.gate["reps"], derive(cfg.seed, "gate"))
    gate_ok = gate.gate(tol["sigmas"])
    gate_entry = {"gamma_hat": gate.gamma_hat, "stderr": gate.stderr, "n": gate.n, "reps": gate.reps,
                  "passed": gate_ok, "tolerance": "sigmas"}
    runtimes = {"gate": time.perf_counter() - t0}
    entries, plot_paths = [], []
    statistical_fail = False
    refused = False
    for idx, exp in enumerate(cfg.experiments):
        kind = exp["kind"]
        params = {k: v for k, v in exp.items() if k != "kind"}
        entry: dict[str, Any] = {"index": idx, "kind": kind, "params": params}
        if kind in LONG_HORIZON and not gate_ok:
            entry.update(status="refused", checks=[])
            refused = True
            entries.append(entry)
            continue
        t1 = time.perf_counter()
        try:
            res = RUNNERS[kind](cfg, params, derive(cfg.seed, "experiment", idx), tol)
        except (MbpireError, ValueError, np.linalg.LinAlgError) as exc:
            entry.update(status="error", error=f"{type(exc).__name__}: {exc}", checks=[])
            statistical_fail = True
            entries.append(entry)
            runtimes[f"{idx}:{kind}"] = time.perf_counter() - t1
            continue
        runtimes[f"{idx}:{kind}"] = time.perf_counter() - t1
        failed = any(c.passed is False for c in res.checks)
        statistical_fail |= failed
        entry.update(status="fail" if failed else "pass", checks=[c.as_dict() for c in res.checks])
        for name, (header, rows) in res.plots.items():
            rel = Path("plots") / f"{idx:02d}_{kind}_{name}.csv"
            _write_csv(out / rel, header, rows)
            plot_paths.append(str(rel))
        entries.append(entry)

    if refused:
        status, code = "refused", EXIT_GATE
    elif statistical_fail:
        status, code = "fail", EXIT_FAIL
    else:
        status, code = "pass", EXIT_PASS
    report = {
        "tool": "mbpire",
        "version": __version__,
        "config": {"name": cfg.name, "seed": cfg.seed, "config_hash": cfg.config_hash, "model_hash": cfg.model_hash,
                   "tolerances": cfg.tolerances},
        "gate": gate_entry,
        "status": status,
        "experiments": entries,
    }
    write_json(out / "report.json", report)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "kind", "check", "passed", "tolerance", "key", "value"])
        w.writerow(["-", "gate", "lyapunov-gate", gate_ok, "sigmas", "gamma_hat", format(gate.gamma_hat, ".17g")])
        for e in entries:
            if not e["checks"]:
                w.writerow([e["index"], e["kind"], "-", e["status"], "-", "", e.get("error", "")])
            for c in e["checks"]:
                key, val = _summary_value(Check(c["name"], c["passed"], c["tolerance"], c["values"]))
                if isinstance(val, (list, np.ndarray)):
                    val = " ".join(format(float(x), ".17g") for x in np.ravel(val))
                elif isinstance(val, float):
                    val = format(val, ".17g")
                w.writerow([e["index"], e["kind"], c["name"], c["passed"], c["tolerance"], key, val])
    manifest = {
        "tool": "mbpire",
        "version": __version__,
        "config_hash": cfg.config_hash,
        "status": status,
        "exit_code": code,
        "experiments": [{"index": e["index"], "kind": e["kind"], "status": e["status"],
                         **({"error": e["error"]} if "error" in e else {})} for e in entries],
        "artifacts": ["report.json", "summary.csv", *plot_paths],
        "config": cfg.raw,
        "runtimes_s": runtimes,
    }
    write_json(out / "manifest.json", manifest)
    return RunResult(code, report, manifest, out)
