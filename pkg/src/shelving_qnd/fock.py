"""Truncated Fock spaces and dense bosonic operators for the three-mode model.

The modes are, in order, the driven primary cavity mode (``plus``), the
auxiliary cavity mode (``minus``) and the mechanical mode (``mech``).  Basis
states are occupation triples ``(n_plus, n_minus, n_mech)`` enumerated
lexicographically.  An optional cap on the conserved excitation number
``n_minus + n_mech`` prunes the product basis; ladder operators are projected
onto whatever survives (matrix elements into excluded states are dropped).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MODES = ("plus", "minus", "mech")
_ALIASES = {"c+": "plus", "c_plus": "plus", "c-": "minus", "c_minus": "minus", "b": "mech"}


@dataclass(frozen=True)
class HilbertSpace:
    """Retained occupation-number basis of the three bosonic modes.

    ``dims[i]`` allows occupations ``0..dims[i]-1`` of mode ``i``.  States
    with ``n_minus + n_mech`` outside ``[n_tot_min, n_tot_max]`` are dropped.
    ``cap_exceeds_dims`` flags a cap that the cutoffs cannot actually reach.
    """

    dims: tuple[int, int, int]
    n_tot_max: int | None = None
    n_tot_min: int = 0
    mode_labels: tuple[str, str, str] = MODES
    states: np.ndarray = field(init=False, repr=False, compare=False)
    basis_index: dict = field(init=False, repr=False, compare=False)
    cap_exceeds_dims: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ranges = [range(d) for d in self.dims]
        kept = []
        for occ in itertools.product(*ranges):
            n_tot = occ[1] + occ[2]
            if n_tot < self.n_tot_min:
                continue
            if self.n_tot_max is not None and n_tot > self.n_tot_max:
                continue
            kept.append(occ)
        if not kept:
            raise ValueError(f"no basis states survive dims={self.dims}, "
                             f"n_tot in [{self.n_tot_min}, {self.n_tot_max}]")
        states = np.array(kept, dtype=int)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "basis_index", {occ: i for i, occ in enumerate(kept)})
        exceeds = self.n_tot_max is not None and min(self.dims[1], self.dims[2]) < self.n_tot_max + 1
        object.__setattr__(self, "cap_exceeds_dims", exceeds)

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def n_tot(self) -> np.ndarray:
        """Conserved excitation number ``n_minus + n_mech`` of every basis state."""
        return self.states[:, 1] + self.states[:, 2]

    def index(self, occupations: Sequence[int]) -> int:
        key = tuple(int(n) for n in occupations)
        try:
            return self.basis_index[key]
        except KeyError:
            raise ValueError(f"occupations {key} are not in the retained basis") from None

    def state(self, i: int) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.states[i])

    def mode(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if 0 <= label < 3:
                return int(label)
            raise ValueError(f"mode index {label} out of range")
        name = _ALIASES.get(label, label)
        if name not in self.mode_labels:
            raise ValueError(f"unknown mode label {label!r}; expected one of {self.mode_labels}")
        return self.mode_labels.index(name)


def make_space(dims: Sequence[int], n_tot_max: int | None = None, n_tot_min: int = 0) -> HilbertSpace:
    """Build the retained basis for per-mode cutoffs ``dims`` and an optional cap."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"expected three mode cutoffs, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"mode cutoffs must be >= 1, got {dims}")
    if n_tot_max is not None and n_tot_max < 0:
        raise ValueError(f"n_tot_max must be non-negative, got {n_tot_max}")
    if n_tot_min < 0:
        raise ValueError(f"n_tot_min must be non-negative, got {n_tot_min}")
    return HilbertSpace(dims, None if n_tot_max is None else int(n_tot_max), int(n_tot_min))


def with_lower_block(space: HilbertSpace) -> tuple[HilbertSpace, list[int] | None]:
    """Space that also keeps the block one excitation below ``space.n_tot_min``.

    Products such as ``b^dag c_-`` pass through that block; build them on the
    returned space and restrict with the index list (``None`` if unchanged).
    """
    if space.n_tot_min == 0:
        return space, None
    work = make_space(space.dims, space.n_tot_max, space.n_tot_min - 1)
    return work, [work.index(occ) for occ in space.states]


@dataclass(frozen=True, eq=False)
class Operator:
    """Dense complex matrix acting on the retained basis of ``space``."""

    space: HilbertSpace
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        n = self.space.size
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match basis size {n}")
        object.__setattr__(self, "matrix", m)

    @property
    def dag(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T)

    def _coerce(self, other):
        if isinstance(other, Operator):
            if other.space != self.space:
                raise ValueError("operators live on different spaces")
            return other.matrix
        return None

    def __matmul__(self, other):
        m = self._coerce(other)
        if m is None:
            return NotImplemented
        return Operator(self.space, self.matrix @ m)

    def __add__(self, other):
        m = self._coerce(other)
        if m is None:
            return NotImplemented
        return Operator(self.space, self.matrix + m)

    def __sub__(self, other):
        m = self._coerce(other)
        if m is None:
            return NotImplemented
        return Operator(self.space, self.matrix - m)

    def __mul__(self, scalar):
        if isinstance(scalar, Operator):
            return NotImplemented
        return Operator(self.space, self.matrix * complex(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Operator(self.space, self.matrix / complex(scalar))

    def __neg__(self):
        return Operator(self.space, -self.matrix)

    def commutator(self, other: "Operator") -> "Operator":
        return self @ other - other @ self

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.matrix - self.matrix.conj().T), initial=0.0) <= tol)


class DensityMatrix(Operator):
    """A state: Hermitian, unit trace, positive semidefinite (to tolerance)."""

    def violations(self, tol: float = 1e-12) -> list[str]:
        m = self.matrix
        out = []
        herm = np.max(np.abs(m - m.conj().T), initial=0.0)
        if herm > tol:
            out.append(f"not Hermitian (max deviation {herm:.3e})")
        tr = np.trace(m)
        if abs(tr - 1) > tol:
            out.append(f"trace {tr:.12g} != 1")
        lam_min = np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min()
        if lam_min < -tol:
            out.append(f"negative eigenvalue {lam_min:.3e}")
        return out

    def check(self, tol: float = 1e-12) -> "DensityMatrix":
        problems = self.violations(tol)
        if problems:
            raise ValueError("invalid density matrix: " + "; ".join(problems))
        return self

    def purity(self) -> float:
        return float(np.real(np.trace(self.matrix @ self.matrix)))


def annihilator(space: HilbertSpace, mode: str | int) -> Operator:
    """Ladder operator with ``<.., n-1, ..| a |.., n, ..> = sqrt(n)`` on retained pairs."""
    k = space.mode(mode)
    m = np.zeros((space.size, space.size), dtype=complex)
    for i, occ in enumerate(space.states):
        n = occ[k]
        if n == 0:
            continue
        lowered = list(occ)
        lowered[k] -= 1
        j = space.basis_index.get(tuple(int(x) for x in lowered))
        if j is not None:
            m[j, i] = np.sqrt(n)
    return Operator(space, m)


def number_op(space: HilbertSpace, mode: str | int) -> Operator:
    k = space.mode(mode)
    return Operator(space, np.diag(space.states[:, k].astype(complex)))


def identity(space: HilbertSpace) -> Operator:
    return Operator(space, np.eye(space.size, dtype=complex))


def n_tot_op(space: HilbertSpace) -> Operator:
    """``c_-^dag c_- + b^dag b``, diagonal in the occupation basis."""
    return Operator(space, np.diag(space.n_tot.astype(complex)))


def fock_state(space: HilbertSpace, occupations: Sequence[int]) -> DensityMatrix:
    """Pure projector onto the occupation-number state ``occupations``."""
    i = space.index(occupations)
    m = np.zeros((space.size, space.size), dtype=complex)
    m[i, i] = 1.0
    return DensityMatrix(space, m)
