"""Time evolution, steady states and quantum-regression correlators.

Propagation follows the eigendecomposition of each (piecewise constant)
Liouvillian: ``rho(t) = V exp(Lambda t) V^-1 rho(0)``.  When the eigenvector
matrix is too ill-conditioned the segment falls back to scipy's
scaling-and-squaring ``expm`` for every step.

Besides plain evolution this module provides the nested time integrals that
the homodyne variance needs::

    m(t) = int_0^t Tr[A rho(s)] ds
    q(t) = int_0^t ds int_0^s ds' Tr[A P(s, s') S rho(s')]

with ``S rho = left @ rho + rho @ right`` and ``P`` the propagator.  Both are
computed exactly between grid points from divided differences of ``exp``.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .fock import DensityMatrix, Operator
from .model import Liouvillian, superop

_COND_LIMIT = 1e10
_RESIDUAL_LIMIT = 1e-9
_SERIES_TERMS = 22
_DENSE_AUG_LIMIT = 400
_DENSE_STEP_LIMIT = 400


def exp_divided_differences(a, b):
    """Divided differences of ``exp`` at the points ``(a, b, 0)``.

    Returns ``(E[a, b], E[b, 0], E[a, b, 0])``, broadcasting over ``a`` and
    ``b``.  They are the off-diagonal entries of ``expm([[a,1,0],[0,b,1],[0,0,0]])``,
    evaluated by scaling and squaring so that coincident points are handled
    without cancellation.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))
    mag = np.maximum(np.abs(a), np.abs(b))
    s = np.ceil(np.log2(np.maximum(mag, 1e-300) / 0.5))
    s = np.maximum(s, 0).astype(int)
    scale = np.ldexp(1.0, -s)
    x, y = a * scale, b * scale

    e01 = np.zeros_like(x)
    e02 = np.zeros_like(x)
    e12 = np.zeros_like(x)
    hk = np.ones_like(x)  # complete homogeneous polynomial h_k(x, y)
    yk = np.ones_like(x)
    fact1 = 1.0  # (k+1)!
    for k in range(_SERIES_TERMS):
        fact2 = fact1 * (k + 2)
        e01 += hk / fact1
        e02 += hk / fact2
        e12 += yk / fact1
        yk = yk * y
        hk = x * hk + yk
        fact1 = fact2

    p00, p11 = np.exp(x), np.exp(y)
    p01, p12, p02 = scale * e01, scale * e12, scale**2 * e02
    for it in range(int(s.max(initial=0))):
        m = s > it
        n02 = p00 * p02 + p01 * p12 + p02
        n01 = p00 * p01 + p01 * p11
        n12 = p11 * p12 + p12
        p02 = np.where(m, n02, p02)
        p01 = np.where(m, n01, p01)
        p12 = np.where(m, n12, p12)
        p00 = np.where(m, p00 * p00, p00)
        p11 = np.where(m, p11 * p11, p11)
    return p01, p12, p02


class _Segment:
    """Spectral data of one constant generator, with per-step caches.

    The propagation route is fixed on first use.  ``auto`` diagonalizes the
    final (unbounded) segment and falls back to ``expm`` when the
    eigenvectors are ill-conditioned; bounded ramp slices are crossed once
    or twice, so under ``auto`` they skip the decomposition and apply
    ``exp(M h)`` to the state directly (``action``).
    """

    def __init__(self, L: Liouvillian, piece, method: str = "auto", bounded: bool = False):
        if method not in ("auto", "eig", "expm"):
            raise ValueError(f"unknown propagation method {method!r}")
        self._L = L
        self._piece = piece
        self.requested = method
        self.bounded = bounded
        self.dim = L.dim
        self.method = None
        self.note = ""
        self._steps: dict = {}
        self._reg: dict = {}

    @property
    def M(self):
        return self._L.piece_matrix(self._piece)

    def _prepare(self):
        if self.method is not None:
            return
        method = self.requested
        if method == "expm":
            self.method = "expm"
            return
        if method == "auto" and self.bounded:
            self.method = "action"
            return
        M = self.M
        M = M.toarray() if scipy.sparse.issparse(M) else M
        self.method = "expm"
        w, V = np.linalg.eig(M)
        cond = np.linalg.cond(V)
        if cond < _COND_LIMIT:
            Vinv = np.linalg.inv(V)
            scale = max(np.linalg.norm(M, 1), 1e-300)
            resid = np.linalg.norm(V @ (w[:, None] * Vinv) - M, 1) / scale
            if resid < _RESIDUAL_LIMIT:
                self.method = "eig"
                self.w, self.V, self.Vinv = w, V, Vinv
            else:
                self.note = f"eigendecomposition residual {resid:.2e}"
        else:
            self.note = f"eigenvector condition number {cond:.2e}"
        if self.method == "expm" and method == "eig":
            raise np.linalg.LinAlgError(f"defective Liouvillian: {self.note}")

    def to_coords(self, v):
        self._prepare()
        return self.Vinv @ v if self.method == "eig" else v

    def from_coords(self, a):
        return self.V @ a if self.method == "eig" else a

    def row(self, r):
        """Observable row vector expressed in this segment's coordinates."""
        self._prepare()
        return r @ self.V if self.method == "eig" else r

    def step(self, a, h):
        self._prepare()
        if self.method == "eig":
            return np.exp(self.w * h) * a
        if self.method == "action" or self.dim > _DENSE_STEP_LIMIT:
            return scipy.sparse.linalg.expm_multiply(scipy.sparse.csr_matrix(self.M) * h, a)
        E = self._steps.get(h)
        if E is None:
            M = self.M
            M = M.toarray() if scipy.sparse.issparse(M) else M
            E = self._steps[h] = scipy.linalg.expm(M * h)
        return E @ a

    # nested-integral machinery -------------------------------------------
    def regression(self, S: np.ndarray, y: np.ndarray, h: float):
        self._prepare()
        key = (id(S), h)
        cached = self._reg.get(key)
        if cached is not None:
            return cached
        if self.method == "eig":
            Ms = self.Vinv @ S @ self.V
            ys = y @ self.V
            lam = self.w * h
            E01, E12, E02 = exp_divided_differences(lam[:, None], lam[None, :])
            ea = np.exp(lam)
            F1 = h * E01 * Ms
            yg0 = ys * (h * E12[0, :])
            yF2 = ys @ (h * h * E02 * Ms)
            cached = ("eig", ea, F1, yg0, yF2)
        else:
            # generator of (rho, W, int rho, int W); large ones are only
            # ever applied to a vector, never exponentiated densely
            D = self.dim
            M = scipy.sparse.csr_matrix(self.M)
            I = scipy.sparse.identity(D, dtype=complex, format="csr")
            Z = scipy.sparse.csr_matrix((D, D), dtype=complex)
            aug = scipy.sparse.bmat([[M, None, Z, Z], [scipy.sparse.csr_matrix(S), M, None, None],
                                     [I, None, None, None], [None, I, None, None]], format="csr")
            if self.method == "expm" and 4 * D <= _DENSE_AUG_LIMIT:
                cached = ("expm", scipy.linalg.expm(aug.toarray() * h))
            else:
                cached = ("action", (aug * h).tocsr())
                if self.bounded:
                    return cached  # crossed once; keep memory flat
        self._reg[key] = cached
        return cached


def _segments(L: Liouvillian, method: str) -> list[tuple[float, float, _Segment]]:
    key = ("segments", method)
    segs = L._cache.get(key)
    if segs is None:
        segs = [(t0, t1, _Segment(L, piece, method, bounded=t1 < math.inf))
                for t0, t1, piece in L.segments()]
        L._cache[key] = segs
    return segs


def _method_counts(segs) -> dict:
    counts: dict = {}
    for _, _, s in segs:
        if s.method is not None:
            counts[s.method] = counts.get(s.method, 0) + 1
    return counts


def _step_key(h: float) -> float:
    return float(f"{h:.11g}")


def _check_times(times, t_start: float = 0.0) -> np.ndarray:
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("empty time grid")
    if np.any(np.diff(t) < 0):
        raise ValueError("time grid must be non-decreasing")
    if t[0] < t_start:
        raise ValueError(f"time grid must start at or after {t_start}")
    return t


_MEMO_SIZE = 32


def _march(L: Liouvillian, v0: np.ndarray, times: np.ndarray, t_start: float, method: str, record):
    """Carry ``v0`` from ``t_start`` through every requested time.

    ``record(k, seg, a)`` receives the state in the coordinates of ``seg``.
    States reached at slice boundaries are memoized per ``(v0, t_start)``
    so that repeated passes over a long ramp are paid for once.
    """
    memo = L._cache.setdefault(("through", method), {})
    mkey = (hashlib.sha1(np.ascontiguousarray(v0).tobytes()).digest(), float(t_start))
    t_cur = t_start
    v = v0
    hit = memo.get(mkey)
    if hit is not None and hit[0] <= times[0]:
        t_cur, v = hit[0], hit[1]
    k = 0
    for t0, t1, seg in _segments(L, method):
        if t1 <= t_cur and t1 < math.inf:
            continue
        if k >= len(times):
            break
        a = seg.to_coords(v)
        while k < len(times) and times[k] <= t1:
            h = _step_key(times[k] - t_cur)
            if h > 0:
                a = seg.step(a, h)
                t_cur = times[k]
            record(k, seg, a)
            k += 1
        if k < len(times) and t1 < math.inf:
            h = _step_key(t1 - t_cur)
            if h > 0:
                a = seg.step(a, h)
            t_cur = t1
        v = seg.from_coords(a)
        if t1 < math.inf and t_cur == t1:
            if mkey not in memo and len(memo) >= _MEMO_SIZE:
                memo.pop(next(iter(memo)))
            memo[mkey] = (t1, v)
    return v


@dataclass
class Trajectory:
    """Time grid plus recorded expectation values and/or states."""

    times: np.ndarray
    expectations: dict = field(default_factory=dict)
    states: list | None = None
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.expectations[name]


def expectation(rho, O: Operator) -> complex:
    if isinstance(rho, Operator) and rho.space != O.space:
        raise ValueError("state and observable live on different spaces")
    m = rho.matrix if isinstance(rho, Operator) else np.asarray(rho)
    return complex(np.sum(O.matrix.T * m))


def evolve(L: Liouvillian, rho0: DensityMatrix, times, observables: dict | None = None,
           store_states: bool | None = None, method: str = "auto") -> Trajectory:
    """Propagate ``rho0`` under ``L`` and sample it on ``times``.

    ``observables`` maps names to operators whose expectation values are
    recorded; states are stored when no observables are given (or when
    ``store_states`` is set).
    """
    if rho0.space != L.space:
        raise ValueError("initial state and Liouvillian live on different spaces")
    times = _check_times(times)
    if L.leaks(rho0):
        raise ValueError("initial state has weight outside the Liouvillian's sector")
    observables = dict(observables or {})
    if store_states is None:
        store_states = not observables
    rows = {name: L.expectation_row(O) for name, O in observables.items()}
    tr_row = L.trace_row()
    exps = {name: np.zeros(len(times), dtype=complex) for name in rows}
    traces = np.zeros(len(times), dtype=complex)
    states = [] if store_states else None
    seg_rows: dict = {}

    def record(k, seg, a):
        cached = seg_rows.get(id(seg))
        if cached is None:
            cached = seg_rows[id(seg)] = ({n: seg.row(r) for n, r in rows.items()}, seg.row(tr_row))
        obs_rows, tr = cached
        for name, r in obs_rows.items():
            exps[name][k] = r @ a
        traces[k] = tr @ a
        if states is not None:
            states.append(DensityMatrix(L.space, L.unvec(seg.from_coords(a))))

    _march(L, L.vec(rho0), times, 0.0, method, record)
    segs = _segments(L, method)
    meta = {
        "methods": _method_counts(segs),
        "notes": [s.note for _, _, s in segs if s.note],
        "max_trace_error": float(np.max(np.abs(traces - 1))),
    }
    return Trajectory(times, exps, states, meta)


def two_time_corr(L: Liouvillian, rho_ref, A: Operator, B: Operator, taus, t_ref: float = 0.0,
                  method: str = "auto") -> np.ndarray:
    """``Tr[A P(t_ref + tau, t_ref) (B rho_ref)]`` for every ``tau`` (quantum regression)."""
    for op in (A, B):
        if op.space != L.space:
            raise ValueError("operators and Liouvillian live on different spaces")
    taus = _check_times(taus)
    m = rho_ref.matrix if isinstance(rho_ref, Operator) else np.asarray(rho_ref)
    seed = B.matrix @ m
    if L.leaks(seed):
        raise ValueError("B rho_ref leaves the Liouvillian's sector")
    row = L.expectation_row(A)
    out = np.zeros(len(taus), dtype=complex)

    def record(k, seg, a):
        out[k] = seg.row(row) @ a

    _march(L, L.vec(seed), t_ref + taus, t_ref, method, record)
    return out


@dataclass
class RegressionIntegrals:
    times: np.ndarray
    mean: np.ndarray         # Tr[A rho(t)]
    integral: np.ndarray     # m(t)
    nested: np.ndarray       # q(t)
    extra: dict = field(default_factory=dict)


def _cached_source(L: Liouvillian, left: Operator, right: Operator) -> np.ndarray:
    key = ("source", left.matrix.tobytes(), right.matrix.tobytes())
    S = L._cache.get(key)
    if S is None:
        S = superop((L.rows, L.cols), (L.rows, L.cols), [(left.matrix, None), (None, right.matrix)])
        L._cache[key] = S
    return S


def _cached_row(L: Liouvillian, A: Operator) -> np.ndarray:
    key = ("row", A.matrix.tobytes())
    y = L._cache.get(key)
    if y is None:
        y = L._cache[key] = L.expectation_row(A)
    return y


def integrated_correlations(L: Liouvillian, rho0, A: Operator, left: Operator, right: Operator,
                            times, observables: dict | None = None, t_start: float = 0.0,
                            method: str = "auto") -> RegressionIntegrals:
    """Exact ``m(t)`` and ``q(t)`` (see module docstring) on a time grid.

    ``rho0`` is the state at time 0; both integrals run from ``t_start``.
    The auxiliary vector ``W(s) = int_{t_start}^s P(s, s') S rho(s') ds'``
    obeys ``dW/ds = L W + S rho``; it is carried alongside ``rho`` in the
    eigenbasis of each segment.  Spectral data and step coefficients are
    cached on ``L``, so repeated calls with other initial states are cheap.
    """
    times = _check_times(times, t_start)
    S = _cached_source(L, left, right)
    y = _cached_row(L, A)
    rows = {n: L.expectation_row(O) for n, O in (observables or {}).items()}
    D = L.dim
    mean = np.zeros(len(times), dtype=complex)
    m_out = np.zeros(len(times), dtype=complex)
    q_out = np.zeros(len(times), dtype=complex)
    extra = {n: np.zeros(len(times), dtype=complex) for n in rows}

    state = {"m": 0.0 + 0.0j, "q": 0.0 + 0.0j}
    v = L.vec(rho0)
    if L.leaks(rho0):
        raise ValueError("initial state has weight outside the Liouvillian's sector")
    src = L.unvec(S @ v)
    expected = left.matrix @ L.unvec(v) + L.unvec(v) @ right.matrix
    if np.max(np.abs(src - expected), initial=0.0) > 1e-10:
        raise ValueError("source superoperator leaves the Liouvillian's sector")
    if t_start > 0:
        held = {}

        def grab(k, seg, a):
            held["v"] = seg.from_coords(a)

        _march(L, v, np.array([t_start]), 0.0, method, grab)
        v = held["v"]
    w = np.zeros(D, dtype=complex)
    t_cur = t_start
    k = 0
    for t0, t1, seg in _segments(L, method):
        if k >= len(times):
            break
        if t1 <= t_start and t1 < math.inf:
            continue
        a = seg.to_coords(v)
        b = seg.to_coords(w)
        ys = seg.row(y)
        obs = {n: seg.row(r) for n, r in rows.items()}

        def advance(a, b, h):
            data = seg.regression(S, y, h)
            if data[0] == "eig":
                _, ea, F1, yg0, yF2 = data
                state["m"] += yg0 @ a
                state["q"] += yg0 @ b + yF2 @ a
                return ea * a, ea * b + F1 @ a
            z0 = np.concatenate([a, b, np.zeros(2 * D, dtype=complex)])
            if data[0] == "expm":
                z = data[1] @ z0
            else:
                z = scipy.sparse.linalg.expm_multiply(data[1], z0)
            state["m"] += y @ z[2 * D:3 * D]
            state["q"] += y @ z[3 * D:]
            return z[:D], z[D:2 * D]

        while k < len(times) and times[k] <= t1:
            h = _step_key(times[k] - t_cur)
            if h > 0:
                a, b = advance(a, b, h)
                t_cur = times[k]
            mean[k] = ys @ a
            m_out[k] = state["m"]
            q_out[k] = state["q"]
            for n, r in obs.items():
                extra[n][k] = r @ a
            k += 1
        if k < len(times) and t1 < math.inf:
            h = _step_key(t1 - t_cur)
            if h > 0:
                a, b = advance(a, b, h)
            t_cur = t1
        v, w = seg.from_coords(a), seg.from_coords(b)
    return RegressionIntegrals(times, mean, m_out, q_out, extra)


def steady_state(L: Liouvillian, tol: float = 1e-9) -> DensityMatrix:
    """Unique fixed point of ``L`` (null vector, Hermitized, clipped, normalized)."""
    M = L.matrix
    _, s, Vh = np.linalg.svd(M)
    scale = max(s[0], 1e-300)
    null = np.flatnonzero(s < tol * scale)
    if len(null) > 1:
        raise ValueError(f"degenerate steady state: {len(null)} singular values below "
                         f"{tol:g}*|L| ({', '.join(f'{x:.2e}' for x in s[null])}); restrict to a symmetry block")
    v = Vh[-1].conj()
    rho = L.unvec(v)
    tr = np.trace(rho)
    if abs(tr) < 1e-14:
        raise ValueError("null vector of L is traceless; no physical steady state")
    rho = rho / tr
    rho = 0.5 * (rho + rho.conj().T)
    lam, U = np.linalg.eigh(rho)
    if lam.min() < -1e-10:
        warnings.warn(f"steady state has eigenvalue {lam.min():.2e}; clipping", RuntimeWarning)
    lam = np.clip(lam, 0.0, None)
    rho = (U * lam) @ U.conj().T
    rho /= np.trace(rho)
    # clipping in the full matrix can populate entries outside the sector only at rounding level
    rho = L.unvec(L.vec(rho))
    rho /= np.trace(rho)
    return DensityMatrix(L.space, rho)


def liouvillian_spectrum(L: Liouvillian) -> np.ndarray:
    return np.linalg.eigvals(L.matrix)
