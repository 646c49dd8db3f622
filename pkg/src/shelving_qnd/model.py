"""Rotating-frame model: effective Hamiltonian, dissipators and Liouvillian.

Vectorization convention (used by every superoperator in this package):
density matrices are flattened column-major, ``vec(rho)[i + j*n] = rho[i, j]``,
so that ``vec(A rho B) = (B^T kron A) vec(rho)``.  A Liouvillian may keep only
a subset of the entries ``rho[i, j]`` (a *sector*), listed in the same
column-major order; the sector must be invariant under the generator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse

from .fock import HilbertSpace, Operator, annihilator, number_op, with_lower_block

RAMP_KINDS = ("constant", "linear", "exponential")


@dataclass(frozen=True)
class RampSchedule:
    """Time profile of the many-photon coupling ``G(t)``.

    ``linear`` rises from 0 to ``G_final`` over ``duration``; ``exponential``
    follows ``G_final * floor_ratio**(1 - t/duration)``.  Both hold
    ``G_final`` afterwards.
    """

    kind: str
    G_final: float
    duration: float = 0.0
    floor_ratio: float = 0.01

    def __post_init__(self):
        if self.kind not in RAMP_KINDS:
            raise ValueError(f"unknown ramp kind {self.kind!r}; expected one of {RAMP_KINDS}")
        if self.kind != "constant":
            if self.duration <= 0:
                raise ValueError("ramp duration must be positive")
            if self.G_final < 0:
                raise ValueError("non-monotonic schedule: ramps must rise to a non-negative G_final")
        if self.kind == "exponential" and not 0 < self.floor_ratio <= 1:
            raise ValueError("non-monotonic schedule: floor_ratio must lie in (0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full_like(t, self.G_final)
        elif self.kind == "linear":
            out = self.G_final * np.clip(t / self.duration, 0.0, 1.0)
        else:
            frac = np.clip(t / self.duration, 0.0, 1.0)
            out = self.G_final * self.floor_ratio ** (1.0 - frac)
        return out if out.ndim else float(out)

    @property
    def end(self) -> float:
        return 0.0 if self.kind == "constant" else self.duration


@dataclass(frozen=True)
class LabFrame:
    omega_c: float
    J: float
    omega_m: float


@dataclass(frozen=True)
class SystemParams:
    """Couplings and rates of the rotating-frame model, in units of ``kappa_plus``."""

    g: float
    G: float | RampSchedule
    delta_omega: float
    kappa_plus: float = 1.0
    kappa_minus: float = 0.0
    gamma: float = 0.0
    n_th: float = 0.0
    alpha: float = math.pi / 2
    epsilon: float = 1.0
    lab_frame: LabFrame | None = None

    def __post_init__(self):
        for name in ("kappa_plus", "kappa_minus", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_th < 0:
            raise ValueError("n_th must be >= 0")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")

    @property
    def G_final(self) -> float:
        return self.G.G_final if isinstance(self.G, RampSchedule) else float(self.G)

    def G_at(self, t: float) -> float:
        return float(self.G(t)) if isinstance(self.G, RampSchedule) else float(self.G)

    @property
    def eta(self) -> float:
        return 2 * self.g / self.kappa_plus

    @property
    def tau_meas(self) -> float:
        return self.kappa_plus / self.g**2 if self.g else math.inf

    def with_(self, **changes) -> "SystemParams":
        return replace(self, **changes)


def model_operators(space: HilbertSpace) -> dict[str, Operator]:
    return {
        "c_plus": annihilator(space, "plus"),
        "c_minus": annihilator(space, "minus"),
        "b": annihilator(space, "mech"),
    }


def build_h_eff(space: HilbertSpace, params: SystemParams, G_value: float | None = None) -> Operator:
    """Resonant part of the displaced-frame Hamiltonian.

    ``H = (dw/2)(n_- - n_b) - G(c_-^dag b + h.c.) - g(b^dag c_+^dag c_- + h.c.)``
    """
    G = params.G_final if G_value is None else float(G_value)
    # every interaction term passes through the block one excitation lower,
    # so build on a space that keeps it and restrict afterwards
    work, keep = with_lower_block(space)
    ops = model_operators(work)
    cp, cm, b = ops["c_plus"], ops["c_minus"], ops["b"]
    quad = 0.5 * params.delta_omega * (number_op(work, "minus") - number_op(work, "mech"))
    beam_splitter = cm.dag @ b
    three_wave = b.dag @ cp.dag @ cm
    H = quad - G * (beam_splitter + beam_splitter.dag) - params.g * (three_wave + three_wave.dag)
    m = H.matrix
    if keep is not None:
        m = m[np.ix_(keep, keep)]
    # products of projected ladder operators are Hermitian only up to rounding
    return Operator(space, 0.5 * (m + m.conj().T))


def build_dissipators(space: HilbertSpace, params: SystemParams) -> list[tuple[float, Operator]]:
    """Damping of both cavity modes plus thermal damping/heating of the mechanics.

    Zero-rate channels are kept so that configurations line up entry by entry.
    """
    ops = model_operators(space)
    return [
        (params.kappa_plus, ops["c_plus"]),
        (params.kappa_minus, ops["c_minus"]),
        (params.gamma * (params.n_th + 1), ops["b"]),
        (params.gamma * params.n_th, ops["b"].dag),
    ]


def lindblad_rhs(H: Operator, dissipators, rho: np.ndarray) -> np.ndarray:
    """``i[rho, H] + sum rate * D[A] rho`` evaluated with matrix products."""
    h = H.matrix
    out = 1j * (rho @ h - h @ rho)
    for rate, A in dissipators:
        if rate == 0:
            continue
        a = A.matrix
        ad = a.conj().T
        ada = ad @ a
        out += rate * (a @ rho @ ad - 0.5 * (ada @ rho + rho @ ada))
    return out


def full_sector(space: HilbertSpace) -> tuple[np.ndarray, np.ndarray]:
    n = space.size
    k = np.arange(n * n)
    return k % n, k // n


def n_tot_sector(space: HilbertSpace, n_tot: Sequence[int] | int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Entries ``rho[i, j]`` with equal excitation number on both sides.

    This block is invariant for every generator built here because all
    channels are covariant under the phase rotation generated by ``N_tot``.
    ``n_tot`` optionally keeps only the listed excitation numbers.
    """
    rows, cols = full_sector(space)
    nt = space.n_tot
    keep = nt[rows] == nt[cols]
    if n_tot is not None:
        allowed = np.atleast_1d(np.asarray(n_tot, dtype=int))
        keep &= np.isin(nt[rows], allowed)
    return rows[keep], cols[keep]


@dataclass(frozen=True, eq=False)
class Liouvillian:
    """Matrix generator on (a sector of) vectorized density matrices.

    ``slices`` holds ``(t_start, t_end, piece)`` parts of a time-dependent
    generator; ``matrix`` applies from the end of the last slice onwards.
    A piece is either a matrix or, when ``ramp = (L0, L1)`` is set, the
    coefficient ``G`` of the affine generator ``L0 + G * L1`` (sparse), so
    that thousands of slices cost no storage.
    """

    space: HilbertSpace
    matrix: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    slices: tuple = ()
    ramp: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return len(self.rows)

    def piece_matrix(self, piece):
        if np.isscalar(piece):
            if self.ramp is None:
                raise ValueError("scalar slice without affine ramp terms")
            L0, L1 = self.ramp
            return (L0 + piece * L1).tocsr()
        return piece

    def segments(self) -> list[tuple[float, float, object]]:
        """``(t_start, t_end, piece)`` including the final unbounded segment."""
        segs = list(self.slices)
        start = segs[-1][1] if segs else 0.0
        segs.append((start, math.inf, self.matrix))
        return segs

    def vec(self, rho) -> np.ndarray:
        m = rho.matrix if isinstance(rho, Operator) else np.asarray(rho)
        return m[self.rows, self.cols].astype(complex)

    def unvec(self, v: np.ndarray) -> np.ndarray:
        n = self.space.size
        m = np.zeros((n, n), dtype=complex)
        m[self.rows, self.cols] = v
        return m

    def leaks(self, rho, tol: float = 1e-12) -> bool:
        """True if ``rho`` has weight outside this Liouvillian's sector."""
        m = rho.matrix if isinstance(rho, Operator) else np.asarray(rho)
        mask = np.ones(m.shape, dtype=bool)
        mask[self.rows, self.cols] = False
        return bool(np.any(np.abs(m[mask]) > tol))

    def trace_row(self) -> np.ndarray:
        return (self.rows == self.cols).astype(complex)

    def expectation_row(self, O) -> np.ndarray:
        """Row vector ``r`` with ``r @ vec(rho) = Tr[O rho]``."""
        o = O.matrix if isinstance(O, Operator) else np.asarray(O)
        return o[self.cols, self.rows]

    def apply(self, rho) -> np.ndarray:
        return self.unvec(self.matrix @ self.vec(rho))


def superop(space_rows, space_cols, terms) -> np.ndarray:
    """Matrix of ``rho -> sum_t A_t rho B_t`` restricted to a sector.

    ``terms`` is a list of ``(A, B)`` dense matrices (``None`` means identity).
    """
    r_i, r_j = space_rows
    c_k, c_l = space_cols
    out = np.zeros((len(r_i), len(c_k)), dtype=complex)
    for A, B in terms:
        left = (r_i[:, None] == c_k[None, :]) if A is None else A[r_i[:, None], c_k[None, :]]
        right = (c_l[None, :] == r_j[:, None]) if B is None else B[c_l[None, :], r_j[:, None]]
        out += left * right
    return out


def _generator_terms(H: Operator, dissipators):
    h = H.matrix
    terms = [(-1j * h, None), (None, 1j * h)]
    for rate, A in dissipators:
        if rate == 0:
            continue
        a = A.matrix
        ad = a.conj().T
        ada = ad @ a
        terms += [(rate * a, ad), (-0.5 * rate * ada, None), (None, -0.5 * rate * ada)]
    return terms


def _check_sector(H: Operator, dissipators, rows, cols, n_probe: int = 3):
    space = H.space
    n = space.size
    if len(rows) == n * n:
        return
    rng = np.random.default_rng(12345)
    mask = np.ones((n, n), dtype=bool)
    mask[rows, cols] = False
    for _ in range(n_probe):
        rho = np.zeros((n, n), dtype=complex)
        rho[rows, cols] = rng.normal(size=len(rows)) + 1j * rng.normal(size=len(rows))
        out = lindblad_rhs(H, dissipators, rho)
        leak = np.max(np.abs(out[mask]), initial=0.0)
        if leak > 1e-10 * max(1.0, np.max(np.abs(out))):
            raise ValueError(f"sector is not invariant under the generator (leak {leak:.3e})")


def build_liouvillian(H: Operator, dissipators, sector=None) -> Liouvillian:
    """Lindblad generator ``i[rho, H] + sum rate * D[A] rho`` as a matrix.

    ``sector`` is ``None`` (all entries) or a ``(rows, cols)`` pair such as
    the one returned by :func:`n_tot_sector`.
    """
    space = H.space
    for _, A in dissipators:
        if A.space != space:
            raise ValueError("dissipator and Hamiltonian live on different spaces")
    rows, cols = full_sector(space) if sector is None else (np.asarray(sector[0]), np.asarray(sector[1]))
    _check_sector(H, dissipators, rows, cols)
    M = superop((rows, cols), (rows, cols), _generator_terms(H, dissipators))
    return Liouvillian(space, M, rows, cols)


def build_time_dependent(space: HilbertSpace, params: SystemParams, n_slices: int = 16,
                         sector=None) -> Liouvillian:
    """Piecewise-constant generator for a ramped ``G``, sampled at slice midpoints."""
    dissipators = build_dissipators(space, params)
    final = build_liouvillian(build_h_eff(space, params), dissipators, sector)
    sched = params.G
    if not isinstance(sched, RampSchedule) or sched.kind == "constant":
        return final
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    edges = np.linspace(0.0, sched.duration, n_slices + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    values = sched(mids)
    if np.any(np.diff(values) < 0):
        raise ValueError("non-monotonic schedule")
    # the generator is affine in G: L(G) = L(0) + G * (L(1) - L(0))
    sector = (final.rows, final.cols)
    L0 = build_liouvillian(build_h_eff(space, params, 0.0), dissipators, sector).matrix
    L1 = build_liouvillian(build_h_eff(space, params, 1.0), dissipators, sector).matrix - L0
    ramp = (scipy.sparse.csr_matrix(L0), scipy.sparse.csr_matrix(L1))
    slices = tuple((float(t0), float(t1), float(G)) for t0, t1, G in zip(edges[:-1], edges[1:], values))
    return Liouvillian(space, final.matrix, final.rows, final.cols, slices, ramp)


@dataclass(frozen=True)
class RwaReport:
    checkable: bool
    threshold: float
    ratios: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.checkable and all(self.passed.values())

    def lines(self) -> list[str]:
        if not self.checkable:
            return ["RWA validity: not checkable (no lab-frame metadata)"]
        out = [f"RWA validity (threshold {self.threshold:g}):"]
        for k, v in self.ratios.items():
            out.append(f"  {k} = {v:.6g}  {'pass' if self.passed[k] else 'FAIL'}")
        return out


def validate_rwa(params: SystemParams, threshold: float = 10.0) -> RwaReport:
    """Compare the mode splitting ``J`` with every rate the RWA neglects against."""
    lab = params.lab_frame
    if lab is None:
        return RwaReport(False, threshold)
    scales = {
        "J/|delta_omega|": abs(params.delta_omega),
        "J/G": abs(params.G_final),
        "J/g": abs(params.g),
        "J/kappa_plus": params.kappa_plus,
    }
    ratios = {k: (lab.J / v if v else math.inf) for k, v in scales.items()}
    return RwaReport(True, threshold, ratios, {k: r >= threshold for k, r in ratios.items()})
