"""Scenario runner: TOML config in, CSV tables and a text report out.

Usage::

    shelving-qnd CONFIG.toml [--out DIR] [--set key=value ...]
                 [--convergence-check] [--threads N]

A config names a ``scenario`` and optionally overrides the scenario's
default tables::

    scenario = "ideal_estimator"
    n_b = [0, 1, 2, 3]

    [params]                  # SystemParams fields, rates in units of kappa_plus
    g = 0.01
    G = 0.1
    delta_omega = 0.13

    [params.ramp]             # optional; G above is then the final value
    kind = "linear"
    duration = 1.0            # or duration_tau (units of tau_meas)

    [time]
    start = 0.05
    stop = 20.0
    num = 400
    units = "tau"             # or "kappa" (units of 1/kappa_plus)

    [truncation]
    n_plus = 3
    n_tot_max = 6

Every resolved value (defaults included) is echoed in ``report.txt`` and
the parameter columns of each CSV row.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .fock import fock_state, make_space, n_tot_op
from .measure import (PROTOCOLS, RampedResult, Truncation, gamma_for_cooperativity, gamma_violating, is_ideal,
                      long_time_estimator, measurement_model, noise_floor, qnd_report, ramped_protocol,
                      record_separation, resolution_time, simulate_estimator)
from .model import (LabFrame, RampSchedule, SystemParams, build_dissipators, build_h_eff, build_liouvillian,
                    validate_rwa)
from .propagate import evolve, expectation, steady_state
from .spin import (EffectiveField, build_spin_liouvillian, full_spin_operators, jc_coefficients, spin_operators,
                   spin_rates, steady_jc)

SCENARIOS = ("spin_dynamics", "steady_jc_scan", "ideal_estimator", "dissipation_sweep", "ramped", "custom")
EXIT_USAGE = 2
EXIT_NUMERIC = 3
DRIFT_LIMIT = 1e-3
FLOAT_FMT = "%.12e"

_PARAM_KEYS = ("g", "G", "delta_omega", "kappa_plus", "kappa_minus", "gamma", "n_th", "alpha", "epsilon")
_SCHEMA = {
    "": {"scenario": str, "output": str, "n_b": list, "convergence_check": bool, "n_slices": int,
         "protocol": str},
    "params": {**{k: float for k in _PARAM_KEYS}},
    "params.ramp": {"kind": str, "duration": float, "duration_tau": float, "floor_ratio": float},
    "params.lab_frame": {"omega_c": float, "J": float, "omega_m": float},
    "time": {"start": float, "stop": float, "num": int, "units": str},
    "truncation": {"n_plus": int, "n_tot_max": int},
    "scan": {"B": list, "G_over_dOmega": float, "start": float, "stop": float, "num": int,
             "full_model": bool, "gamma": list},
}

# Per-scenario defaults: the reference parameter set of each study.
_DEFAULTS = {
    "spin_dynamics": {
        "n_b": [1, 2, 3],
        "params": {"g": 0.1},
        "scan": {"B": [0.5, 1.0, 2.0], "G_over_dOmega": 0.75},
        "time": {"start": 0.0, "stop": 5.0, "num": 201, "units": "tau"},
        # g = 0.1 puts ~eta^2 n_b photons in c_+; 3 levels drift 4e-3 at n_b = 3
        "truncation": {"n_plus": 4},
    },
    "steady_jc_scan": {
        "n_b": [1, 2, 3, 4, 5],
        "params": {"g": 0.01, "delta_omega": 0.13},
        "scan": {"start": 0.1, "stop": 3.0, "num": 59, "full_model": False},
        "truncation": {"n_plus": 3},
    },
    "ideal_estimator": {
        "n_b": [0, 1, 2, 3],
        "n_slices": 16,
        "params": {"g": 0.01, "G": 0.1, "delta_omega": 0.13, "ramp": {"kind": "linear", "duration": 1.0}},
        "time": {"start": 0.05, "stop": 20.0, "num": 400, "units": "tau"},
        "truncation": {"n_plus": 3, "n_tot_max": 6},
    },
    "dissipation_sweep": {
        "n_b": [0, 1, 2],
        "n_slices": 4,
        "params": {"g": 0.1, "G": 0.1, "delta_omega": 0.13, "kappa_minus": 1e-4, "n_th": 100.0,
                   "ramp": {"kind": "linear", "duration": 1.0}},
        "time": {"start": 0.05, "stop": 20.0, "num": 400, "units": "tau"},
        "truncation": {"n_plus": 3, "n_tot_max": 6},
        # boundary of C_1 >= 100 (2 n_th + 1), and the g^2/kappa bound broken 10x
        "scan": {"gamma": ["cooperativity_boundary", "violating_10x"]},
    },
    "ramped": {
        "n_b": [0, 1, 2, 3],
        "n_slices": 4096,
        "params": {"g": 0.01, "G": 5.0, "delta_omega": 1.0,
                   "ramp": {"kind": "exponential", "duration_tau": 0.1, "floor_ratio": 0.01}},
        "time": {"start": 0.01, "stop": 3.0, "num": 300, "units": "tau"},
        "truncation": {"n_plus": 3, "n_tot_max": 6},
    },
    "custom": {
        "n_b": [0, 1],
        "n_slices": 16,
        "protocol": "steady",
        "params": {"g": 0.01, "G": 0.1, "delta_omega": 0.13},
        "time": {"start": 0.05, "stop": 5.0, "num": 100, "units": "tau"},
        "truncation": {"n_plus": 3, "n_tot_max": 6},
    },
}


class ConfigError(Exception):
    """Invalid configuration; ``str`` carries line-level diagnostics."""


class NumericalFailure(Exception):
    def __init__(self, operation: str, cause: Exception):
        super().__init__(f"numerical failure in {operation}: {type(cause).__name__}: {cause}")
        self.operation = operation


# -- config ------------------------------------------------------------------

def _key_lines(text: str) -> dict[str, int]:
    """Line number of every ``key = value`` (dotted with its table)."""
    lines = {}
    table = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\s]+?)\s*\]$", line)
        if m:
            table = re.sub(r"\s+", "", m.group(1))
            lines.setdefault(table, no)
            continue
        m = re.match(r"^([A-Za-z0-9_.\"]+)\s*=", line)
        if m:
            key = m.group(1).strip('"')
            lines[f"{table}.{key}" if table else key] = no
    return lines


def _where(key: str, lines: dict) -> str:
    if key in lines:
        return f"line {lines[key]}"
    if key.startswith("--set "):
        return key
    return "config"


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b=value`` -> (["a", "b"], value); the value is read as TOML, else a string."""
    if "=" not in item:
        raise ConfigError(f"--set {item}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not re.fullmatch(r"[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*", key):
        raise ConfigError(f"--set {item}: malformed key {key!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def _apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {'.'.join(path)}: {part!r} is not a table")
    node[path[-1]] = value


def _validate(cfg: dict, lines: dict, origin: dict) -> None:
    errors = []

    def walk(node: dict, prefix: str):
        allowed = _SCHEMA.get(prefix)
        for k, v in node.items():
            full = f"{prefix}.{k}" if prefix else k
            where = _where(origin.get(full, full), lines)
            if isinstance(v, dict):
                if full not in _SCHEMA:
                    errors.append(f"{where}: unknown table [{full}]")
                else:
                    walk(v, full)
                continue
            if allowed is None or k not in allowed:
                errors.append(f"{where}: unknown key {full!r}")
                continue
            want = allowed[k]
            ok = isinstance(v, want) and not (want is not bool and isinstance(v, bool))
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                ok = True
            if not ok:
                errors.append(f"{where}: {full} must be {want.__name__}, got {type(v).__name__} {v!r}")

    walk(cfg, "")
    if errors:
        raise ConfigError("\n".join(errors))


@dataclass
class Scenario:
    """Fully resolved scenario: defaults merged with config and overrides."""

    name: str
    cfg: dict
    lines: dict
    origin: dict

    def where(self, key: str) -> str:
        return _where(self.origin.get(key, key), self.lines)

    def get(self, dotted: str, default=None):
        node = self.cfg
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node


def load_config(text: str, overrides=(), source: str = "config") -> Scenario:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _key_lines(text)
    origin: dict = {}
    for item in overrides:
        path, value = parse_override(item)
        _apply_override(raw, path, value)
        origin[".".join(path)] = f"--set {'.'.join(path)}"
    if "scenario" not in raw:
        raise ConfigError(f"{source}: missing required key 'scenario' (one of {', '.join(SCENARIOS)})")
    name = raw["scenario"]
    if name not in SCENARIOS:
        raise ConfigError(f"{_where(origin.get('scenario', 'scenario'), lines)}: unknown scenario {name!r}; "
                          f"expected one of {', '.join(SCENARIOS)}")
    _validate(raw, lines, origin)
    cfg = _deep_merge(_DEFAULTS[name], raw)
    cfg.setdefault("convergence_check", False)
    cfg.setdefault("output", "out")
    sc = Scenario(name, cfg, lines, origin)
    _check_semantics(sc)
    return sc


def _check_semantics(sc: Scenario) -> None:
    errors = []
    n_b = sc.get("n_b")
    if not n_b or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in n_b):
        errors.append(f"{sc.where('n_b')}: n_b must be a non-empty list of non-negative integers")
    elif sc.name == "spin_dynamics" or sc.name == "steady_jc_scan":
        if 0 in n_b:
            errors.append(f"{sc.where('n_b')}: {sc.name} needs n_b >= 1 (an empty spin has no dynamics)")
    t = sc.get("time")
    if t is not None and sc.name != "steady_jc_scan":
        if t.get("units") not in ("tau", "kappa"):
            errors.append(f"{sc.where('time.units')}: time.units must be 'tau' or 'kappa'")
        if t.get("num", 0) < 1:
            errors.append(f"{sc.where('time.num')}: time.num must be >= 1")
        if not t.get("stop", 0) >= t.get("start", 0):
            errors.append(f"{sc.where('time.stop')}: time grid must be monotone (stop >= start)")
        if sc.name not in ("spin_dynamics",) and t.get("start", 0) <= 0:
            errors.append(f"{sc.where('time.start')}: estimator integration times must start above 0")
    tr = sc.get("truncation", {})
    if tr.get("n_plus", 1) < 1:
        errors.append(f"{sc.where('truncation.n_plus')}: truncation.n_plus must be >= 1")
    if n_b and "n_tot_max" in tr and sc.name in ("ideal_estimator", "dissipation_sweep", "ramped", "custom"):
        if max(n_b) > tr["n_tot_max"]:
            errors.append(f"{sc.where('truncation.n_tot_max')}: n_b={max(n_b)} exceeds truncation.n_tot_max="
                          f"{tr['n_tot_max']}")
    if sc.name == "custom" and sc.get("protocol") not in PROTOCOLS:
        errors.append(f"{sc.where('protocol')}: protocol must be one of {PROTOCOLS}")
    ramp = sc.get("params.ramp")
    if ramp is not None and "duration" in ramp and "duration_tau" in ramp:
        errors.append(f"{sc.where('params.ramp.duration_tau')}: give ramp duration or duration_tau, not both")
    if sc.name == "dissipation_sweep":
        for v in sc.get("scan.gamma", []):
            if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0) and v not in (
                    "cooperativity_boundary", "violating_10x"):
                errors.append(f"{sc.where('scan.gamma')}: scan.gamma entries must be rates >= 0 or "
                              "'cooperativity_boundary' / 'violating_10x'")
    if errors:
        raise ConfigError("\n".join(errors))
    try:
        build_params(sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{sc.where('params')}: {exc}") from None


def build_params(sc: Scenario, **changes) -> SystemParams:
    p = dict(sc.get("params", {}))
    ramp = p.pop("ramp", None)
    lab = p.pop("lab_frame", None)
    p.update(changes)
    if "G" not in p:
        p["G"] = 0.0
    if "delta_omega" not in p:
        p["delta_omega"] = 0.0
    if ramp is not None and not isinstance(p["G"], RampSchedule):
        kappa = p.get("kappa_plus", 1.0)
        duration = ramp.get("duration")
        if "duration_tau" in ramp:
            duration = ramp["duration_tau"] * kappa / p["g"] ** 2
        p["G"] = RampSchedule(ramp.get("kind", "linear"), float(p["G"]), float(duration or 0.0),
                              float(ramp.get("floor_ratio", 0.01)))
    if lab is not None:
        p["lab_frame"] = LabFrame(**lab)
    return SystemParams(**p)


def time_grid(sc: Scenario, params: SystemParams) -> np.ndarray:
    t = sc.get("time")
    unit = params.tau_meas if t["units"] == "tau" else 1.0
    return np.linspace(t["start"], t["stop"], t["num"]) * unit


def truncation_of(sc: Scenario, bump: int = 0) -> Truncation:
    tr = sc.get("truncation", {})
    return Truncation(tr.get("n_plus", 3) + bump, tr.get("n_tot_max", 6) + bump)


# -- scenarios ----------------------------------------------------------------

@dataclass
class Table:
    name: str
    header: list
    rows: list


@dataclass
class Outcome:
    tables: list
    report: list
    observables: dict   # arrays compared by the convergence check


def _param_echo(p: SystemParams) -> dict:
    ramp = p.G if isinstance(p.G, RampSchedule) else None
    return {
        "g": p.g, "G": p.G_final, "delta_omega": p.delta_omega, "kappa_plus": p.kappa_plus,
        "kappa_minus": p.kappa_minus, "gamma": p.gamma, "n_th": p.n_th, "alpha": p.alpha,
        "epsilon": p.epsilon, "ramp_kind": ramp.kind if ramp else "constant",
        "ramp_duration": ramp.duration if ramp else 0.0,
    }


def _guard(operation: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError, ArithmeticError) as exc:
        raise NumericalFailure(operation, exc) from exc


def _pmap(fn, cells, threads: int):
    if threads <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


def _spin_dynamics(sc: Scenario, threads: int, bump: int = 0) -> Outcome:
    ratio = sc.get("scan.G_over_dOmega")
    n_plus = truncation_of(sc, bump).n_plus
    base = build_params(sc)
    cells = [(B, n) for B in sc.get("scan.B") for n in sc.get("n_b")]

    def cell(c):
        B, n = c
        dw = B / math.sqrt(1 + 4 * ratio**2)
        p = base.with_(G=ratio * dw, delta_omega=dw)
        times = time_grid(sc, p)
        f = EffectiveField.from_params(p)
        space = make_space((n_plus, n + 1, n + 1), n_tot_max=n, n_tot_min=n)
        L = _guard("build_liouvillian", build_liouvillian, build_h_eff(space, p), build_dissipators(space, p))
        ops = full_spin_operators(space, f)
        obs = {"Jy": ops["Jy"], "Jpar": ops["Jpar"], "n_tot": n_tot_op(space)}
        full = _guard("evolve (full model)", evolve, L, fock_state(space, (0, 0, n)), times, obs)
        blk = spin_operators(n, f)
        Ls = _guard("build_spin_liouvillian", build_spin_liouvillian, blk, f, p)
        red = _guard("evolve (reduced model)", evolve, Ls, fock_state(blk.space, (0, 0, n)), times,
                     {"Jy": blk.Jy, "Jpar": blk.Jpar})
        rates = spin_rates(f, p)
        return p, times, full, red, rates

    results = _pmap(cell, cells, threads)
    header = ["B", "n_b", "t", "t_tau", "Jy_full", "Jpar_full", "Jy_reduced", "Jpar_reduced", "n_tot_full",
              "half_relax_rate_t", *_param_echo(base)]
    rows, report, observables = [], ["spin dynamics (full three-mode vs reduced spin model):"], {}
    for (B, n), (p, times, full, red, rates) in zip(cells, results):
        echo = _param_echo(p)
        for k, t in enumerate(times):
            rows.append([B, n, t, t / p.tau_meas, full["Jy"][k].real, full["Jpar"][k].real,
                         red["Jy"][k].real, red["Jpar"][k].real, full["n_tot"][k].real,
                         rates.relaxation_rate * t, *echo.values()])
        dev = float(np.max(np.abs(full["Jpar"].real - red["Jpar"].real)))
        report.append(f"  B={B:g} n_b={n}: Gamma_phi={rates.gamma_phi:.6e} Gamma_+={rates.gamma_plus:.6e} "
                      f"Gamma_-={rates.gamma_minus:.6e} T_eff={rates.T_eff:.6e} "
                      f"max|Jpar_full-Jpar_reduced|={dev:.3e} ({dev / p.eta**2:.3f} eta^2)")
        observables[f"Jpar B={B:g} n_b={n}"] = full["Jpar"].real
        observables[f"Jy B={B:g} n_b={n}"] = full["Jy"].real
    return Outcome([Table("spin_dynamics", header, rows)], report, observables)


def _steady_jc_scan(sc: Scenario, threads: int, bump: int = 0) -> Outcome:
    base = build_params(sc)
    ratios = np.linspace(sc.get("scan.start"), sc.get("scan.stop"), sc.get("scan.num"))
    full_model = sc.get("scan.full_model")
    n_plus = truncation_of(sc, bump).n_plus
    cells = [(r, n) for r in ratios for n in sc.get("n_b")]

    def cell(c):
        r, n = c
        p = base.with_(G=r * base.delta_omega)
        analytic = steady_jc(n, p)
        full = math.nan
        if full_model:
            space = make_space((n_plus, n + 1, n + 1), n_tot_max=n, n_tot_min=n)
            L = _guard("build_liouvillian", build_liouvillian, build_h_eff(space, p), build_dissipators(space, p))
            rho = _guard("steady_state", steady_state, L)
            f = EffectiveField.from_params(p)
            ops = full_spin_operators(space)
            v = jc_coefficients(f, p.kappa_plus)
            full = expectation(rho, ops["Jx"] * v[0] + ops["Jy"] * v[1] + ops["Jz"] * v[2]).real
        return p, analytic, full

    results = _pmap(cell, cells, threads)
    header = ["G_over_dOmega", "n_b", "jc_thermal", "jc_full", *_param_echo(base)]
    rows, observables = [], {}
    for (r, n), (p, analytic, full) in zip(cells, results):
        rows.append([r, n, analytic, full, *_param_echo(p).values()])
    if full_model:
        for n in sc.get("n_b"):
            observables[f"jc_full n_b={n}"] = np.array([row[3] for row in rows if row[1] == n])
    report = ["steady <J_c> scan:"]
    for n in sc.get("n_b"):
        vals = [(row[0], row[2]) for row in rows if row[1] == n]
        r_best, v_best = max(vals, key=lambda rv: abs(rv[1]))
        report.append(f"  n_b={n}: max |<J_c>| = {v_best:.6e} at G/dOmega = {r_best:.6g}")
    return Outcome([Table("steady_jc_scan", header, rows)], report, observables)


def _estimator_rows(records: dict, extra_cols: list, extra_vals: list, params: SystemParams,
                    protocol: str) -> list:
    echo = list(_param_echo(params).values())
    rows = []
    for n, rec in records.items():
        floor = noise_floor(params, rec.times, protocol)
        n_tot = rec.extra.get("n_tot")
        for k, t in enumerate(rec.times):
            rows.append([*extra_vals, n, t, t / params.tau_meas, rec.n_meas_mean[k], rec.n_meas_std[k],
                         floor[k], rec.mean_X[k], n_tot[k].real if n_tot is not None else math.nan, *echo])
    return rows


_ESTIMATOR_HEADER = ["n_b", "t", "t_tau", "n_meas_mean", "n_meas_std", "noise_floor", "mean_X", "n_tot"]


def _separation_lines(records: dict, params: SystemParams) -> list:
    out = []
    keys = sorted(records)
    for a, b in zip(keys[:-1], keys[1:]):
        t = record_separation(records[a], records[b])
        if math.isinf(t):
            out.append(f"  n_b {a} vs {b}: bands never separate within the time grid")
        else:
            out.append(f"  n_b {a} vs {b}: bands separate at {t / params.tau_meas:.6g} tau_meas")
    return out


def _ideal_estimator(sc: Scenario, threads: int, bump: int = 0, protocol: str = "steady") -> Outcome:
    p = build_params(sc)
    times = time_grid(sc, p)
    records = _guard("estimator_statistics", simulate_estimator, p, sc.get("n_b"), times, protocol,
                     truncation_of(sc, bump), sc.get("n_slices"))
    rows = _estimator_rows(records, [], [], p, protocol)
    report = [f"estimator ({protocol} protocol):"]
    report += _separation_lines(records, p)
    if protocol == "steady":
        for n in sorted(records):
            rec = records[n]
            target = long_time_estimator(n, p)
            report.append(f"  n_b={n}: mean at t={rec.tau[-1]:.6g} tau = {rec.n_meas_mean[-1] + 0.0:.6e}"
                          f" (long-time target {target:.6e}), std = {rec.n_meas_std[-1]:.6e}")
            if n >= 1:
                report.append(f"           resolution-time bound = {resolution_time(n, p) / p.tau_meas:.6g} tau_meas")
    observables = {f"{k} n_b={n}": getattr(rec, k) for n, rec in records.items()
                   for k in ("n_meas_mean", "n_meas_std")}
    return Outcome([Table(sc.name, list(_ESTIMATOR_HEADER) + list(_param_echo(p)), rows)], report, observables)


def _resolve_gammas(sc: Scenario) -> list:
    base = build_params(sc)
    out = []
    for v in sc.get("scan.gamma"):
        if v == "cooperativity_boundary":
            out.append(gamma_for_cooperativity(100 * (2 * base.n_th + 1), base))
        elif v == "violating_10x":
            out.append(gamma_violating(base, 10.0))
        else:
            out.append(float(v))
    return out


def _dissipation_sweep(sc: Scenario, threads: int, bump: int = 0) -> Outcome:
    gammas = _resolve_gammas(sc)
    base = build_params(sc)
    times = time_grid(sc, base)

    def cell(gam):
        p = base.with_(gamma=gam)
        return p, _guard("estimator_statistics", simulate_estimator, p, sc.get("n_b"), times, "steady",
                         truncation_of(sc, bump), sc.get("n_slices"))

    results = _pmap(cell, gammas, threads)
    header = ["C1", *_ESTIMATOR_HEADER, *_param_echo(base)]
    rows, report, observables = [], ["dissipation sweep:"], {}
    for gam, (p, records) in zip(gammas, results):
        rep = qnd_report(p)
        rows += _estimator_rows(records, ["C1"], [rep.cooperativity], p, "steady")
        report.append(f" gamma = {gam:.6e}:")
        report += ["  " + s for s in rep.lines()]
        report += _separation_lines(records, p)
        for n, rec in records.items():
            report.append(f"  n_b={n}: <N_tot> at t={rec.tau[-1]:.6g} tau = {rec.extra['n_tot'][-1].real:.6e}")
            observables[f"n_meas_mean gamma={gam:.3e} n_b={n}"] = rec.n_meas_mean
            observables[f"n_tot gamma={gam:.3e} n_b={n}"] = rec.extra["n_tot"].real
    return Outcome([Table("dissipation_sweep", header, rows)], report, observables)


def _ramped(sc: Scenario, threads: int, bump: int = 0) -> Outcome:
    p = build_params(sc)
    if not isinstance(p.G, RampSchedule) or p.G.kind == "constant":
        raise ConfigError(f"{sc.where('params.ramp')}: the ramped scenario needs a [params.ramp] table")
    times = time_grid(sc, p)
    trunc = truncation_of(sc, bump)
    res: RampedResult = _guard("ramped_protocol", ramped_protocol, p, sc.get("n_b"), times, trunc,
                               sc.get("n_slices"))
    rows = _estimator_rows(res.records, [], [], p, "ramped")
    header = list(_ESTIMATOR_HEADER) + list(_param_echo(p))
    # spin direction through the ramp and just after it
    t_f = p.G.duration
    spin_times = np.linspace(0.0, 2 * t_f, 201)
    spin_rows = []
    for n in sc.get("n_b"):
        if n == 0:
            continue
        L, rho0 = measurement_model(p, n, trunc, sc.get("n_slices"))
        ops = full_spin_operators(L.space)
        tr = _guard("evolve (ramp)", evolve, L, rho0, spin_times, {k: ops[k] for k in ("Jx", "Jy", "Jz")})
        for k, t in enumerate(spin_times):
            spin_rows.append([n, t, t / p.tau_meas, p.G_at(t), tr["Jx"][k].real, tr["Jy"][k].real,
                              tr["Jz"][k].real, *_param_echo(p).values()])
    report = ["ramped protocol:"] + ["  " + s for s in res.ordering.lines()]
    for n, ang in res.angle_from_x.items():
        report.append(f"  n_b={n}: spin direction after the ramp is {ang:.6g} deg from e_x")
    report += _separation_lines(res.records, p)
    observables = {f"{k} n_b={n}": getattr(rec, k) for n, rec in res.records.items()
                   for k in ("n_meas_mean", "n_meas_std")}
    return Outcome([Table("ramped", header, rows),
                    Table("ramped_spin", ["n_b", "t", "t_tau", "G", "Jx", "Jy", "Jz", *_param_echo(p)], spin_rows)],
                   report, observables)


def _custom(sc: Scenario, threads: int, bump: int = 0) -> Outcome:
    protocol = sc.get("protocol")
    if protocol == "ramped":
        return _ramped(sc, threads, bump)
    return _ideal_estimator(sc, threads, bump, protocol)


_RUNNERS = {
    "spin_dynamics": _spin_dynamics,
    "steady_jc_scan": _steady_jc_scan,
    "ideal_estimator": _ideal_estimator,
    "dissipation_sweep": _dissipation_sweep,
    "ramped": _ramped,
    "custom": _custom,
}


# -- convergence ----------------------------------------------------------------

def relative_drift(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.max(np.abs(b), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def convergence_check(sc: Scenario, base: Outcome, threads: int = 1) -> list[str]:
    """Re-run with ``n_plus + 1`` and ``n_tot_max + 1``; report the largest relative drift."""
    lines = [f"truncation convergence (n_plus+1, n_tot_max+1; pass if drift < {DRIFT_LIMIT:g}):"]
    if not base.observables:
        lines.append("  not applicable: this scenario has no truncated observables")
        return lines
    p = build_params(sc)
    tr = truncation_of(sc)
    n_b = sc.get("n_b")
    uses_cap = sc.name in ("ideal_estimator", "dissipation_sweep", "ramped", "custom")
    if uses_cap and not is_ideal(p) and tr.n_tot_max <= max(n_b):
        lines.append(f"  WARNING: under-truncated: n_tot_max={tr.n_tot_max} equals the largest simulated "
                     f"n_b={max(n_b)}, so no excitation can be added by the environment")
    bumped = _RUNNERS[sc.name](sc, threads, bump=1)
    worst = 0.0
    for key, ref in base.observables.items():
        d = relative_drift(bumped.observables[key], ref)
        worst = max(worst, d)
        lines.append(f"  {key}: drift {d:.3e}")
    lines.append(f"  max drift {worst:.3e}: {'pass' if worst < DRIFT_LIMIT else 'FAIL (truncation not converged)'}")
    return lines


# -- output ----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % (float(v) + 0.0)  # no "-0"
    return str(v)


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _config_echo(sc: Scenario) -> list[str]:
    out = ["resolved configuration:"]

    def walk(node, prefix):
        for k in sorted(node):
            v = node[k]
            full = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(v, full)
            else:
                out.append(f"  {full} = {v!r}")

    walk(sc.cfg, "")
    return out


def run(sc: Scenario, out_dir: Path, threads: int = 1, convergence: bool | None = None) -> list[Path]:
    if convergence is not None:
        sc.cfg["convergence_check"] = bool(convergence)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcome = _RUNNERS[sc.name](sc, threads)
    params = build_params(sc)
    report = [f"shelving-qnd {__version__} scenario {sc.name}", ""]
    report += _config_echo(sc) + [""]
    report += qnd_report(params).lines() + [""]
    report += validate_rwa(params).lines() + [""]
    report += outcome.report
    if sc.get("convergence_check"):
        report += [""] + convergence_check(sc, outcome, threads)
    written = []
    for table in outcome.tables:
        path = out_dir / f"{table.name}.csv"
        path.write_text(table_csv(table), encoding="utf-8")
        written.append(path)
    path = out_dir / "report.txt"
    path.write_text("\n".join(report) + "\n", encoding="utf-8")
    written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shelving-qnd", description="Run a QND phonon-measurement scenario "
                                 "from a TOML config and write CSV tables plus report.txt.")
    ap.add_argument("config", nargs="?", help="TOML config file")
    ap.add_argument("--out", help="output directory (default: config key 'output', else ./out)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. --set params.g=0.02 (repeatable)")
    ap.add_argument("--convergence-check", action="store_true",
                    help="re-run with larger truncation and report the drift")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for independent scenario cells")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config is None:
        ap.print_usage(sys.stderr)
        print("shelving-qnd: error: a config file is required", file=sys.stderr)
        return EXIT_USAGE
    path = Path(args.config)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"shelving-qnd: error: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    if not text.strip():
        ap.print_usage(sys.stderr)
        print(f"shelving-qnd: error: {path} is empty", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("shelving-qnd: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        sc = load_config(text, args.overrides, source=str(path))
        out = Path(args.out) if args.out else Path(sc.get("output"))
        written = run(sc, out, args.threads, True if args.convergence_check else None)
    except ConfigError as exc:
        print(f"shelving-qnd: invalid config {path}:", file=sys.stderr)
        for line in str(exc).splitlines():
            print(f"  {line}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"shelving-qnd: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
