"""Homodyne record of the primary mode and the phonon-number estimator.

The output field is ``c_out = c_in - sqrt(kappa) c_+`` and the detector
measures ``X = (e^{i alpha} c_out + h.c.) / sqrt(2)``.  With
``Y = e^{i alpha} c_+ + e^{-i alpha} c_+^dag``::

    <X(t)>          = -sqrt(kappa/2) <Y(t)>
    <X(t) X(t')>    = delta(t - t')/2 + (kappa/2) Tr[Y P(t, t') J rho(t')]   (t > t')
    J rho           = e^{i alpha} c_+ rho + e^{-i alpha} rho c_+^dag

(quantum regression for the normally and time ordered output correlator).
Integrating over the window gives
``Var[int X] = T/2 + kappa q(T) - (kappa/2) m(T)^2`` with ``m`` and ``q``
from :func:`propagate.integrated_correlations`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fock import DensityMatrix, Operator, annihilator, fock_state, make_space, n_tot_op
from .model import (Liouvillian, RampSchedule, SystemParams, build_time_dependent, n_tot_sector)
from .propagate import Trajectory, integrated_correlations
from .spin import EffectiveField, full_spin_operators, steady_jc

PROTOCOLS = ("steady", "ramped")

# Long-time estimator values f[n]*n = steady_jc(n)/steady_jc(1) at the ideal
# reference point g=0.01, G=0.1, dOmega=0.13 (B/T_eff = 2.444897), from thermal
# averages of J_par on the N_tot = n block.  Regenerate with long_time_estimator.
REFERENCE_LONG_TIME = {
    0: 0.0,
    1: 1.0,
    2: 2.158527596,
    3: 3.344349653,
    4: 4.533814253,
    5: 5.723706899,
}


def estimator_prefactor(params: SystemParams, protocol: str = "steady") -> float:
    """Signal per phonon that the estimator divides out."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    base = params.g**2 / params.kappa_plus
    if protocol == "ramped":
        return math.sqrt(2 * base)
    G, dw = params.G_final, params.delta_omega
    denom = 2 * G * G + dw * dw
    if denom == 0 or G * dw == 0:
        raise ValueError("steady-state estimator is undefined when G*dOmega = 0")
    return math.sqrt(8 * base) * G * dw / denom


def long_time_estimator(n_b: int, params: SystemParams) -> float:
    """Long-time mean of the steady-protocol estimator: ``n`` for 0, 1 and ``f[n] n`` beyond."""
    ref = steady_jc(1, params)
    if ref == 0:
        raise ValueError("no steady-state signal for a single phonon at these parameters")
    return steady_jc(n_b, params) / ref


def f_factor(n: int, params: SystemParams) -> float:
    if n < 1:
        raise ValueError("f[n] is defined for n >= 1")
    return long_time_estimator(n, params) / n


def quadrature_ops(c_plus: Operator, alpha: float) -> tuple[Operator, Operator, Operator]:
    """``Y`` and the left/right factors of the regression source ``J``."""
    left = np.exp(1j * alpha) * c_plus
    right = np.exp(-1j * alpha) * c_plus.dag
    return left + left.dag, left, right


def homodyne_mean(traj: Trajectory, params: SystemParams) -> np.ndarray:
    """``<X_out(t)>`` from recorded ``<c_+>`` (key ``"c_plus"``) or stored states."""
    if "c_plus" in traj.expectations:
        cp = np.asarray(traj.expectations["c_plus"])
    elif traj.states:
        a = annihilator(traj.states[0].space, "plus").matrix
        cp = np.array([np.sum(a.T * s.matrix) for s in traj.states])
    else:
        raise ValueError("trajectory records neither <c_plus> nor states")
    c_out = -math.sqrt(params.kappa_plus) * cp
    return math.sqrt(2) * np.real(np.exp(1j * params.alpha) * c_out)


def reduced_homodyne_mean(jc_mean, params: SystemParams) -> np.ndarray:
    """Adiabatic-elimination prediction ``sqrt(8g^2/kappa) Im[e^{i alpha} <J_c>]``."""
    jc = np.asarray(jc_mean)
    return math.sqrt(8 * params.g**2 / params.kappa_plus) * np.imag(np.exp(1j * params.alpha) * jc)


@dataclass
class MeasurementRecord:
    """Estimator statistics on the measurement window.

    ``times`` are integration times measured from the window start
    ``t_start`` (absolute time ``t_start + times``).
    """

    times: np.ndarray
    mean_X: np.ndarray
    n_meas_mean: np.ndarray
    n_meas_std: np.ndarray
    protocol: str
    params: SystemParams
    n_b: int | None = None
    t_start: float = 0.0
    extra: dict = field(default_factory=dict)
    X_mean_avg: np.ndarray | None = None   # (1/t) int X_out, before the prefactor
    X_std_avg: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.n_meas_std < 0):
            raise ValueError("negative standard deviation")

    @property
    def tau(self) -> np.ndarray:
        return self.times / self.params.tau_meas


def estimator_statistics(L: Liouvillian, rho0: DensityMatrix, params: SystemParams, times,
                         protocol: str = "steady", t_start: float = 0.0,
                         observables: dict | None = None, n_b: int | None = None,
                         method: str = "auto") -> MeasurementRecord:
    """Mean and standard deviation of the estimator for integration times ``times``.

    ``times`` are measured from ``t_start``; a zero integration time is
    rejected because the estimator divides by it.
    """
    T = np.asarray(times, dtype=float)
    if np.any(T <= 0):
        raise ValueError("integration times must be positive")
    if not math.isclose(params.alpha, math.pi / 2):
        warnings.warn("estimator uses alpha != pi/2; the signal is not maximal", RuntimeWarning)
    c_plus = annihilator(L.space, "plus")
    Y, left, right = quadrature_ops(c_plus, params.alpha)
    obs = dict(observables or {})
    obs.setdefault("c_plus", c_plus)
    grid = t_start + T
    res = integrated_correlations(L, rho0, Y, left, right, grid, obs, t_start=t_start, method=method)
    kappa = params.kappa_plus
    P = estimator_prefactor(params, protocol)
    m = res.integral.real
    q = res.nested.real
    var = T / 2 + kappa * q - 0.5 * kappa * m * m
    # rounding can push a near-floor variance a hair below zero
    var = np.maximum(var, 0.0)
    x_avg = -math.sqrt(kappa / 2) * m / T
    x_std = np.sqrt(var) / T
    mean_X = -math.sqrt(kappa / 2) * res.mean.real
    extra = {k: v for k, v in res.extra.items()}
    if P == 0:
        warnings.warn("estimator prefactor vanishes (g = 0); only X_mean_avg/X_std_avg are defined",
                      RuntimeWarning)
        est_mean = est_std = np.full(len(T), np.nan)
    else:
        est_mean, est_std = x_avg / P, x_std / P
    return MeasurementRecord(T, mean_X, est_mean, est_std, protocol, params, n_b, t_start, extra,
                             x_avg, x_std)


def estimator_variance(L: Liouvillian, rho0: DensityMatrix, params: SystemParams, times,
                       protocol: str = "steady", t_start: float = 0.0) -> np.ndarray:
    """Standard deviation of the estimator (white-noise floor plus regression terms)."""
    return estimator_statistics(L, rho0, params, times, protocol, t_start).n_meas_std


def current_floor(times) -> np.ndarray:
    """Std of ``(1/t) int X_out`` from vacuum noise alone: ``sqrt(1/(2t))``."""
    T = np.asarray(times, dtype=float)
    return np.sqrt(1 / (2 * T))


def noise_floor(params: SystemParams, times, protocol: str = "steady") -> np.ndarray:
    """Estimator std from vacuum noise alone: ``sqrt(1/(2t)) / prefactor``."""
    return current_floor(times) / estimator_prefactor(params, protocol)


# -- model assembly ---------------------------------------------------------

@dataclass(frozen=True)
class Truncation:
    n_plus: int = 3          # c_+ occupations 0..n_plus-1
    n_tot_max: int = 6       # cap on n_minus + n_mech when dissipation mixes blocks


def is_ideal(params: SystemParams) -> bool:
    return params.gamma == 0 and params.kappa_minus == 0


def measurement_model(params: SystemParams, n_b: int, truncation: Truncation = Truncation(),
                      n_slices: int = 16, cache: dict | None = None) -> tuple[Liouvillian, DensityMatrix]:
    """Liouvillian and initial Fock state for ``n_b`` phonons.

    Without spurious dissipation ``N_tot`` is exactly conserved and only the
    ``N_tot = n_b`` block is simulated.  Otherwise all blocks up to the cap
    are kept (N_tot-diagonal sector) and one Liouvillian serves every
    ``n_b``; ``cache`` lets callers share it.
    """
    if n_b < 0:
        raise ValueError("n_b must be non-negative")
    if is_ideal(params):
        space = make_space((truncation.n_plus, n_b + 1, n_b + 1), n_tot_max=n_b, n_tot_min=n_b)
        key = ("block", n_b)
    else:
        if n_b > truncation.n_tot_max:
            raise ValueError(f"n_b={n_b} exceeds the truncation n_tot_max={truncation.n_tot_max}")
        N = truncation.n_tot_max
        space = make_space((truncation.n_plus, N + 1, N + 1), n_tot_max=N)
        key = ("shared",)
    L = None if cache is None else cache.get(key)
    if L is None:
        L = build_time_dependent(space, params, n_slices=n_slices, sector=n_tot_sector(space))
        if cache is not None:
            cache[key] = L
    return L, fock_state(L.space, (0, 0, n_b))


def simulate_estimator(params: SystemParams, n_b_values, times, protocol: str = "steady",
                       truncation: Truncation = Truncation(), n_slices: int = 16,
                       t_start: float = 0.0, record_n_tot: bool = True,
                       cache: dict | None = None) -> dict[int, MeasurementRecord]:
    cache = {} if cache is None else cache
    out = {}
    for n_b in n_b_values:
        L, rho0 = measurement_model(params, n_b, truncation, n_slices, cache)
        obs = {"n_tot": n_tot_op(L.space)} if record_n_tot else None
        out[n_b] = estimator_statistics(L, rho0, params, times, protocol, t_start, obs, n_b)
    return out


# -- resolution ----------------------------------------------------------------

def j_factor(n: int, params: SystemParams) -> float:
    """``4 Im[e^{i alpha} (<J_c>_{n+1} - <J_c>_n)]`` with the real steady ``<J_c>``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return 4 * math.sin(params.alpha) * (steady_jc(n + 1, params) - steady_jc(n, params))


def resolution_time(n: int, params: SystemParams) -> float:
    """Integration time beyond which ``n`` and ``n+1`` phonons are distinguishable.

    Returns ``inf`` when ``j_n`` vanishes (no signal difference).
    """
    j = j_factor(n, params)
    if abs(j) < 1e-15:
        return math.inf
    return params.tau_meas / (params.epsilon * j * j)


def separation_time(times, mean_a, std_a, mean_b, std_b) -> float:
    """First time ``|mean_a - mean_b|`` reaches ``std_a + std_b`` (linear interpolation).

    Returns ``inf`` if the bands never separate on the grid.
    """
    t = np.asarray(times, dtype=float)
    gap = np.abs(np.asarray(mean_a) - np.asarray(mean_b)) - (np.asarray(std_a) + np.asarray(std_b))
    hit = np.flatnonzero(gap >= 0)
    if len(hit) == 0:
        return math.inf
    k = hit[0]
    if k == 0:
        return float(t[0])
    g0, g1 = gap[k - 1], gap[k]
    return float(t[k - 1] + (t[k] - t[k - 1]) * (-g0) / (g1 - g0))


def record_separation(a: MeasurementRecord, b: MeasurementRecord) -> float:
    if not np.array_equal(a.times, b.times):
        raise ValueError("records live on different time grids")
    return separation_time(a.times, a.n_meas_mean, a.n_meas_std, b.n_meas_mean, b.n_meas_std)


# -- QND feasibility -------------------------------------------------------------

@dataclass(frozen=True)
class QndReport:
    measurement_rate: float          # 1/tau_meas = g^2/kappa
    kappa_minus: float
    mech_decoherence: float          # gamma (2 n_th + 1)
    cooperativity: float             # C_1 = 4 g^2 / (kappa gamma)
    margin_kappa_minus: float
    margin_mech: float
    cooperativity_needed: float      # 100 (2 n_th + 1)

    @property
    def cooperativity_ok(self) -> bool:
        return self.cooperativity >= self.cooperativity_needed

    @property
    def ok(self) -> bool:
        return self.cooperativity_ok and self.margin_kappa_minus > 1 and self.margin_mech > 1

    def lines(self) -> list[str]:
        def fmt(x):
            return "inf" if math.isinf(x) else f"{x:.6g}"
        return [
            "QND feasibility:",
            f"  g^2/kappa_plus (1/tau_meas)  = {fmt(self.measurement_rate)}",
            f"  kappa_minus                  = {fmt(self.kappa_minus)}  margin {fmt(self.margin_kappa_minus)}",
            f"  gamma (2 n_th + 1)           = {fmt(self.mech_decoherence)}  margin {fmt(self.margin_mech)}",
            f"  C_1 = 4 g^2/(kappa_plus gamma) = {fmt(self.cooperativity)}"
            f"  (need >= {fmt(self.cooperativity_needed)}: {'pass' if self.cooperativity_ok else 'FAIL'})",
        ]


def qnd_report(params: SystemParams) -> QndReport:
    rate = params.g**2 / params.kappa_plus
    mech = params.gamma * (2 * params.n_th + 1)

    def ratio(a, b):
        return math.inf if b == 0 else a / b

    C1 = ratio(4 * params.g**2, params.kappa_plus * params.gamma)
    return QndReport(rate, params.kappa_minus, mech, C1, ratio(rate, params.kappa_minus),
                     ratio(rate, mech), 100 * (2 * params.n_th + 1))


# -- ramped protocol ---------------------------------------------------------------

def reference_ramp_params(**changes) -> SystemParams:
    """Exponential-ramp reference point: g=0.01, dOmega=1, G_f=5, t_f=0.1 tau_meas."""
    g = changes.pop("g", 0.01)
    kappa = changes.get("kappa_plus", 1.0)
    t_f = changes.pop("t_f", 0.1 * kappa / g**2)
    G_f = changes.pop("G_final", 5.0)
    base = SystemParams(g=g, G=RampSchedule("exponential", G_f, t_f, 0.01), delta_omega=1.0)
    return base.with_(**changes)


def reference_steady_params(**changes) -> SystemParams:
    """Ideal steady-protocol point: g=0.01, G=0.1, dOmega=0.13, G ramped linearly over 1/kappa."""
    kappa = changes.get("kappa_plus", 1.0)
    G = changes.pop("G", 0.1)
    sched = G if isinstance(G, RampSchedule) else RampSchedule("linear", G, 1.0 / kappa)
    base = SystemParams(g=0.01, G=sched, delta_omega=0.13)
    return base.with_(**changes)


def reference_dissipative_params(gamma: float, **changes) -> SystemParams:
    """Spurious-dissipation point: g=0.1, G=0.1, dOmega=0.13, kappa_minus=1e-4, n_th=100."""
    changes.setdefault("g", 0.1)
    changes.setdefault("kappa_minus", 1e-4)
    changes.setdefault("n_th", 100.0)
    return reference_steady_params(gamma=gamma, **changes)


def gamma_for_cooperativity(C1: float, params: SystemParams) -> float:
    """Mechanical damping giving single-photon cooperativity ``4 g^2 / (kappa gamma) = C1``."""
    return 4 * params.g**2 / (params.kappa_plus * C1)


def gamma_violating(params: SystemParams, factor: float = 10.0) -> float:
    """Damping with ``gamma (2 n_th + 1) = factor * g^2 / kappa``: the QND bound broken ``factor`` times."""
    return factor * params.g**2 / (params.kappa_plus * (2 * params.n_th + 1))


@dataclass(frozen=True)
class OrderingReport:
    """Checks of ``1/B << 1/kappa << t_ramp << tau_meas`` (factor ``margin``)."""

    ratios: dict
    margin: float

    @property
    def ok(self) -> bool:
        return all(r >= self.margin for r in self.ratios.values())

    def lines(self) -> list[str]:
        out = [f"ramp timescale ordering (need ratios >= {self.margin:g}):"]
        for k, v in self.ratios.items():
            out.append(f"  {k} = {v:.6g}  {'pass' if v >= self.margin else 'WARN'}")
        return out


def ramp_ordering(params: SystemParams, margin: float = 10.0) -> OrderingReport:
    sched = params.G
    if not isinstance(sched, RampSchedule) or sched.kind == "constant":
        raise ValueError("ramped protocol needs a ramp schedule for G")
    B_final = EffectiveField.from_params(params).B
    kappa = params.kappa_plus
    ratios = {
        "B_final/kappa_plus": B_final / kappa,
        "kappa_plus*t_ramp": kappa * sched.duration,
        "tau_meas/t_ramp": params.tau_meas / sched.duration,
    }
    return OrderingReport(ratios, margin)


@dataclass
class RampedResult:
    records: dict
    ordering: OrderingReport
    spin_direction: dict       # n_b -> (<Jx>, <Jy>, <Jz>) at the end of the ramp
    angle_from_x: dict         # n_b -> degrees between <J> and e_x


def spin_direction(rho: DensityMatrix) -> tuple[np.ndarray, float]:
    ops = full_spin_operators(rho.space)
    vec = np.array([np.real(np.sum(ops[k].matrix.T * rho.matrix)) for k in ("Jx", "Jy", "Jz")])
    norm = np.linalg.norm(vec)
    angle = math.degrees(math.acos(np.clip(vec[0] / norm, -1, 1))) if norm > 0 else math.nan
    return vec, angle


def ramped_protocol(params: SystemParams | None = None, n_b_values=(0, 1, 2, 3), times=None,
                    truncation: Truncation = Truncation(), n_slices: int = 4096,
                    cache: dict | None = None) -> RampedResult:
    """Ramp ``G`` up, then integrate the homodyne current from the end of the ramp.

    The spin precesses about ``B`` by ~2000 rad during the reference ramp,
    so the slices must satisfy ``B h << 1``; 4096 midpoint slices reproduce
    a tight ODE solution of the ramp to 1e-3 degrees.
    """
    from .propagate import evolve

    params = reference_ramp_params() if params is None else params
    ordering = ramp_ordering(params)
    if not ordering.ok:
        warnings.warn("ramp timescale ordering violated:\n" + "\n".join(ordering.lines()), RuntimeWarning)
    t_f = params.G.duration
    if times is None:
        times = np.linspace(0.01, 1.0, 100) * params.tau_meas
    cache = {} if cache is None else cache
    records, direction, angles = {}, {}, {}
    for n_b in n_b_values:
        L, rho0 = measurement_model(params, n_b, truncation, n_slices, cache)
        if n_b > 0:
            traj = evolve(L, rho0, [t_f])
            direction[n_b], angles[n_b] = spin_direction(traj.states[-1])
        obs = {"n_tot": n_tot_op(L.space)}
        records[n_b] = estimator_statistics(L, rho0, params, times, "ramped", t_f, obs, n_b)
    return RampedResult(records, ordering, direction, angles)
