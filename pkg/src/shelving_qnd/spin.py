"""Effective-spin picture of the auxiliary cavity mode and the mechanics.

With ``N_tot = n_minus + n_mech`` fixed, the two modes form a spin of length
``j = N_tot / 2`` (Schwinger bosons): ``J_+ = b^dag c_-``,
``J_z = (n_mech - n_minus) / 2``.  The resonant Hamiltonian restricted to a
block is ``-B . J`` with ``B = (2G, 0, dOmega)``.  Eliminating the damped
primary mode to leading order in ``eta = 2g/kappa_plus`` leaves dephasing
along ``e_B``, spin flips along ``e_B`` and a small coherent correction.

Block bases are ordered ``m = j, j-1, ..., -j`` (``n_minus`` ascending).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .fock import DensityMatrix, HilbertSpace, Operator, annihilator, make_space, with_lower_block
from .model import Liouvillian, SystemParams, build_liouvillian

# Raising/lowering operators along e_B enter the reduced master equation with
# spherical normalization (J1 +- i Jy)/sqrt(2).  With this choice the rates
# below reproduce the full three-mode dynamics: <J_par> relaxes at
# (Gamma_+ + Gamma_-)/2 and the transverse spin at Gamma_phi/2 + that/2.
LADDER_SCALE = 1 / math.sqrt(2)


@dataclass(frozen=True)
class EffectiveField:
    Bx: float
    Bz: float

    @classmethod
    def from_params(cls, params: SystemParams, G: float | None = None) -> "EffectiveField":
        G = params.G_final if G is None else G
        return cls(2.0 * G, float(params.delta_omega))

    @property
    def B(self) -> float:
        return math.hypot(self.Bx, self.Bz)

    @property
    def theta(self) -> float:
        """Polar angle of ``e_B`` measured from ``e_z`` towards ``e_x``."""
        return math.atan2(self.Bx, self.Bz)

    @property
    def unit(self) -> np.ndarray:
        B = self.B
        if B == 0:
            raise ValueError("effective field vanishes; e_B undefined")
        return np.array([self.Bx / B, 0.0, self.Bz / B])

    def vector(self) -> np.ndarray:
        return np.array([self.Bx, 0.0, self.Bz])


def _cartesian(space: HilbertSpace, keep=None) -> dict[str, np.ndarray]:
    cm = annihilator(space, "minus").matrix
    b = annihilator(space, "mech").matrix
    jp = b.conj().T @ cm
    jz = 0.5 * (b.conj().T @ b - cm.conj().T @ cm)
    if keep is not None:
        jp, jz = jp[np.ix_(keep, keep)], jz[np.ix_(keep, keep)]
    jm = jp.conj().T
    return {"Jx": 0.5 * (jp + jm), "Jy": -0.5j * (jp - jm), "Jz": jz, "Jp": jp, "Jm": jm}


@dataclass(frozen=True, eq=False)
class SpinBlock:
    """Spin operators on the ``N_tot`` block of the (c_-, b) modes.

    The e_B-frame operators (``Jpar``, ``J1``, ``Jprime_plus``,
    ``Jprime_minus``) are present only when a field was supplied.
    """

    n_tot: int
    space: HilbertSpace
    Jx: Operator
    Jy: Operator
    Jz: Operator
    Jp: Operator
    Jm: Operator
    field: EffectiveField | None = None
    Jpar: Operator | None = None
    J1: Operator | None = None
    Jprime_plus: Operator | None = None
    Jprime_minus: Operator | None = None

    @property
    def j(self) -> float:
        return self.n_tot / 2

    @property
    def dim(self) -> int:
        return self.n_tot + 1

    def casimir(self) -> Operator:
        return self.Jx @ self.Jx + self.Jy @ self.Jy + self.Jz @ self.Jz

    def m_values(self) -> np.ndarray:
        return self.j - np.arange(self.dim)


def block_space(n_tot: int) -> HilbertSpace:
    """States ``(0, n_minus, n_mech)`` with ``n_minus + n_mech = n_tot``."""
    return make_space((1, n_tot + 1, n_tot + 1), n_tot_max=n_tot, n_tot_min=n_tot)


def spin_operators(n_tot: int, field: EffectiveField | SystemParams | None = None) -> SpinBlock:
    if n_tot < 0:
        raise ValueError("N_tot must be non-negative")
    # products like b^dag c_- pass through the N_tot - 1 block, so build them
    # on the capped space and restrict afterwards
    outer = make_space((1, n_tot + 1, n_tot + 1), n_tot_max=n_tot)
    keep = np.flatnonzero(outer.n_tot == n_tot)
    space = block_space(n_tot)
    mats = _cartesian(outer, keep)
    ops = {k: Operator(space, v) for k, v in mats.items()}
    if isinstance(field, SystemParams):
        field = EffectiveField.from_params(field)
    if field is None:
        return SpinBlock(n_tot, space, **ops)
    frame = _frame_operators(mats, field)
    return SpinBlock(n_tot, space, **ops, field=field,
                     **{k: Operator(space, v) for k, v in frame.items()})


def _frame_operators(mats: dict, field: EffectiveField) -> dict[str, np.ndarray]:
    """Rotate Cartesian matrices about ``e_y`` by ``theta`` so ``e_z -> e_B``."""
    U = scipy.linalg.expm(-1j * field.theta * mats["Jy"])
    Ud = U.conj().T
    jpar = U @ mats["Jz"] @ Ud
    j1 = U @ mats["Jx"] @ Ud
    jy = mats["Jy"]
    return {"Jpar": jpar, "J1": j1, "Jprime_plus": j1 + 1j * jy, "Jprime_minus": j1 - 1j * jy}


def full_spin_operators(space: HilbertSpace, field: EffectiveField | None = None) -> dict[str, Operator]:
    """Spin operators on a full three-mode space (identity on the primary mode).

    Exact on every retained block: ``J_+`` only passes through the block one
    excitation lower, which is kept while the products are formed.
    """
    work, keep = with_lower_block(space)
    mats = _cartesian(work, keep)
    out = {k: Operator(space, v) for k, v in mats.items()}
    if field is not None:
        out.update({k: Operator(space, v) for k, v in _frame_operators(mats, field).items()})
    return out


def jc_coefficients(field: EffectiveField, kappa_plus: float = 1.0) -> np.ndarray:
    """Complex vector ``v`` with ``J_c = v . (Jx, Jy, Jz)``."""
    Bx = field.Bx
    k = kappa_plus / 2
    e_plus = np.array([1.0, 1j, 0.0])
    Bvec = field.vector()
    v = Bx * Bvec + k * np.cross(e_plus, Bvec) + k * k * e_plus
    return v / (k * k + field.B**2)


def j_c_operator(block: SpinBlock, field: EffectiveField, params: SystemParams | None = None) -> Operator:
    """Linear combination of spin components the primary mode follows adiabatically."""
    kappa = 1.0 if params is None else params.kappa_plus
    if kappa <= 0:
        raise ValueError("kappa_plus must be positive")
    v = jc_coefficients(field, kappa)
    return v[0] * block.Jx + v[1] * block.Jy + v[2] * block.Jz


@dataclass(frozen=True)
class SpinRates:
    """Rates of the reduced spin master equation (units of ``kappa_plus``).

    ``beta_B`` is ``B / T_eff``; it is ``0`` at infinite temperature and
    ``+-inf`` when the field points along ``+-e_z``.
    """

    gamma_phi: float
    gamma_plus: float
    gamma_minus: float
    h1_coefficients: tuple[float, float]
    beta_B: float
    B: float
    eta: float

    @property
    def T_eff(self) -> float:
        """Effective temperature in the same units as ``B``."""
        if self.beta_B == 0:
            return math.inf
        return self.B / self.beta_B if math.isfinite(self.beta_B) else 0.0

    @property
    def zero_temperature(self) -> bool:
        return math.isinf(self.beta_B)

    @property
    def infinite_temperature(self) -> bool:
        return self.beta_B == 0

    @property
    def relaxation_rate(self) -> float:
        """Rate at which ``<J_par>`` relaxes with the normalized ladder operators."""
        return LADDER_SCALE**2 * (self.gamma_plus + self.gamma_minus)


def spin_rates(field: EffectiveField, params: SystemParams) -> SpinRates:
    B, Bx, Bz = field.B, field.Bx, field.Bz
    if B == 0:
        raise ValueError("spin rates are undefined for a vanishing effective field")
    g, kappa = params.g, params.kappa_plus
    lorentz = g * g * kappa / (B * B + (kappa / 2) ** 2)
    gamma_phi = (Bx * Bx / (B * B)) * 4 * g * g / kappa
    gamma_plus = (B + Bz) ** 2 / (2 * B * B) * lorentz
    gamma_minus = (B - Bz) ** 2 / (2 * B * B) * lorentz
    s = g * g * B / (B * B + (kappa / 2) ** 2)
    h1 = (s * Bz / B, s * (B * B + Bz * Bz) / (2 * B * B))
    if B - Bz <= 0:
        beta = math.inf
    elif B + Bz <= 0:
        beta = -math.inf
    else:
        beta = 2 * math.log((B + Bz) / (B - Bz))
    return SpinRates(gamma_phi, gamma_plus, gamma_minus, h1, beta, B, 2 * g / kappa)


def thermal_populations(j: float, beta_B: float) -> np.ndarray:
    """Gibbs weights of ``m = j, ..., -j`` for ``exp(beta_B * J_par)``."""
    m = j - np.arange(int(round(2 * j)) + 1)
    if math.isinf(beta_B):
        p = np.zeros(len(m))
        p[0 if beta_B > 0 else -1] = 1.0
        return p
    w = np.exp(beta_B * (m - (m.max() if beta_B >= 0 else m.min())))
    return w / w.sum()


def thermal_jpar(n_tot: int, beta_B: float) -> float:
    j = n_tot / 2
    p = thermal_populations(j, beta_B)
    return float(p @ (j - np.arange(len(p))))


def thermal_spin_state(block: SpinBlock, beta_B: float | SpinRates) -> DensityMatrix:
    """Gibbs state ``exp(beta_B J_par) / Z`` on the block (``beta_B = B/T_eff``)."""
    if isinstance(beta_B, SpinRates):
        beta_B = beta_B.beta_B
    if block.Jpar is None:
        raise ValueError("block has no field; build it with spin_operators(n_tot, field)")
    lam, U = np.linalg.eigh(block.Jpar.matrix)
    # eigh sorts ascending; weights come back for m = j..-j
    p = thermal_populations(block.j, beta_B)[::-1]
    rho = (U * p) @ U.conj().T
    return DensityMatrix(block.space, 0.5 * (rho + rho.conj().T))


def steady_jc(n_b: int, params: SystemParams) -> float:
    """Long-time ``<J_c>`` for ``n_b`` initial phonons: ``(Bx/B) <J_par>_thermal``."""
    if n_b < 0:
        raise ValueError("n_b must be non-negative")
    field = EffectiveField.from_params(params)
    if n_b == 0 or field.B == 0 or field.Bx == 0:
        return 0.0
    rates = spin_rates(field, params)
    return field.Bx / field.B * thermal_jpar(n_b, rates.beta_B)


H1_FORMS = ("stated", "swapped")


def build_spin_liouvillian(block: SpinBlock, field: EffectiveField, params: SystemParams,
                           ladder_scale: float = LADDER_SCALE, h1_form: str = "stated") -> Liouvillian:
    """Reduced master equation for the spin in the frame rotating with ``B . J``.

    ``i[rho, H1] + Gamma_phi D[J_par] + Gamma_+ D[s J'_+] + Gamma_- D[s J'_-]``
    with ``s = ladder_scale``.  ``H1 = a J_par - c (J^2 - J_par^2)`` uses the
    published coefficients (``h1_form="stated"``).  ``"swapped"`` uses
    ``-c J_par + a (J^2 - J_par^2)``, which reproduces the precession shift
    of the full model for spin 1/2.  Neither affects ``<J_par>(t)``.
    """
    if h1_form not in H1_FORMS:
        raise ValueError(f"unknown h1_form {h1_form!r}; expected one of {H1_FORMS}")
    if block.Jpar is None or block.field != field:
        block = spin_operators(block.n_tot, field)
    if block.n_tot == 0:
        zero = Operator(block.space, np.zeros((1, 1)))
        return build_liouvillian(zero, [])
    rates = spin_rates(field, params)
    if field.B < 10 * 2 * params.g**2 / params.kappa_plus:
        warnings.warn(f"secular approximation questionable: B = {field.B:.3g} is not >> "
                      f"2g^2/kappa = {2 * params.g**2 / params.kappa_plus:.3g}", RuntimeWarning)
    a, c = rates.h1_coefficients
    transverse = block.casimir() - block.Jpar @ block.Jpar
    if h1_form == "swapped":
        a, c = -c, -a
    H1 = a * block.Jpar - c * transverse
    dissipators = [
        (rates.gamma_phi, block.Jpar),
        (rates.gamma_plus, ladder_scale * block.Jprime_plus),
        (rates.gamma_minus, ladder_scale * block.Jprime_minus),
    ]
    return build_liouvillian(H1, dissipators)


def reduce_to_spin(rho, n_tot: int) -> DensityMatrix:
    """Trace out the primary mode and keep the ``N_tot`` block, renormalized."""
    m = rho.matrix if isinstance(rho, Operator) else np.asarray(rho)
    space = rho.space
    target = block_space(n_tot)
    out = np.zeros((target.size, target.size), dtype=complex)
    sel = [i for i, occ in enumerate(space.states) if occ[1] + occ[2] == n_tot]
    for i in sel:
        oi = space.states[i]
        for k in sel:
            ok = space.states[k]
            if oi[0] != ok[0]:
                continue
            out[target.index((0, oi[1], oi[2])), target.index((0, ok[1], ok[2]))] += m[i, k]
    weight = np.trace(out).real
    if weight <= 0:
        raise ValueError(f"state has no weight in the N_tot={n_tot} block")
    return DensityMatrix(target, out / weight)


def interaction_picture_transverse(jprime_plus_mean, field: EffectiveField, times) -> np.ndarray:
    """Rotate ``<J'_+>(t)`` from the lab frame into the frame co-rotating with ``B . J``."""
    return np.exp(1j * field.B * np.asarray(times)) * np.asarray(jprime_plus_mean)


def trace_distance(a, b) -> float:
    ma = a.matrix if isinstance(a, Operator) else np.asarray(a)
    mb = b.matrix if isinstance(b, Operator) else np.asarray(b)
    d = ma - mb
    return float(0.5 * np.abs(np.linalg.eigvalsh(0.5 * (d + d.conj().T))).sum())
