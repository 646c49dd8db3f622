import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from shelving_qnd.fock import DensityMatrix, annihilator, fock_state, make_space
from shelving_qnd.model import SystemParams, build_dissipators, build_h_eff, lindblad_rhs
from shelving_qnd.measure import (REFERENCE_LONG_TIME, MeasurementRecord, Truncation, current_floor,
                                  estimator_prefactor, estimator_statistics, f_factor, gamma_for_cooperativity,
                                  gamma_violating, homodyne_mean, j_factor, long_time_estimator,
                                  measurement_model, noise_floor, qnd_report, ramp_ordering,
                                  record_separation, reduced_homodyne_mean, reference_dissipative_params,
                                  reference_ramp_params, resolution_time, separation_time,
                                  simulate_estimator, spin_direction)
from shelving_qnd.propagate import evolve
from shelving_qnd.spin import EffectiveField, steady_jc


def _gibbs_jpar(n, B, Bz):
    """<J_par> from an explicit Boltzmann sum, m = -j..j, weights ((B+Bz)/(B-Bz))^(2m)."""
    j = n / 2
    m = np.arange(-j, j + 1)
    w = ((B + Bz) / (B - Bz)) ** (2 * m)
    return float((m * w).sum() / w.sum())


def test_prefactors():
    p = SystemParams(g=0.02, G=0.1, delta_omega=0.13, kappa_plus=2.0)
    base = 0.02**2 / 2.0
    assert estimator_prefactor(p) == pytest.approx(math.sqrt(8 * base) * 0.1 * 0.13 / (0.02 + 0.0169))
    assert estimator_prefactor(p, "ramped") == pytest.approx(math.sqrt(2 * base))
    with pytest.raises(ValueError):
        estimator_prefactor(p, "pulsed")
    with pytest.raises(ValueError):
        estimator_prefactor(p.with_(G=0.0))
    np.testing.assert_allclose(noise_floor(p, [2.0]) * estimator_prefactor(p), current_floor([2.0]))


def test_long_time_estimator_table(steady_params):
    p = steady_params
    B = EffectiveField.from_params(p).B
    one = _gibbs_jpar(1, B, p.delta_omega)
    for n, expected in REFERENCE_LONG_TIME.items():
        assert long_time_estimator(n, p) == pytest.approx(expected, abs=1e-9)
        # the Bx/B factor cancels in the ratio
        assert _gibbs_jpar(n, B, p.delta_omega) / one == pytest.approx(expected, abs=1e-9)


def test_f_factor_large_n_limit(steady_params):
    p = steady_params
    G, dw = p.G_final, p.delta_omega
    B = EffectiveField.from_params(p).B
    assert f_factor(400, p) == pytest.approx((2 * G * G + dw * dw) / (B * dw), rel=1e-2)
    assert f_factor(1, p) == pytest.approx(1)
    with pytest.raises(ValueError):
        f_factor(0, p)
    with pytest.raises(ValueError):
        long_time_estimator(1, p.with_(G=0.0))


def test_j_factor_and_resolution_time(steady_params):
    p = steady_params
    assert j_factor(0, p) == pytest.approx(4 * steady_jc(1, p))
    assert resolution_time(0, p) == pytest.approx(p.tau_meas / j_factor(0, p) ** 2)
    assert resolution_time(0, p.with_(epsilon=0.5)) == pytest.approx(2 * resolution_time(0, p))
    assert math.isinf(resolution_time(0, p.with_(alpha=0.0)))
    with pytest.raises(ValueError):
        j_factor(-1, p)


def test_separation_time_interpolates():
    t = np.array([1.0, 2.0, 3.0])
    # gap = |diff| - (sa + sb) = -1, 0.5, 2 -> crosses at 1 + 1/1.5
    mean_a, mean_b = np.array([0.0, 1.5, 3.0]), np.zeros(3)
    std = np.full(3, 0.5)
    assert separation_time(t, mean_a, std, mean_b, std) == pytest.approx(1 + 1 / 1.5)
    assert separation_time(t, mean_a + 5, std, mean_b, std) == 1.0
    assert math.isinf(separation_time(t, mean_b, std, mean_b, std))


def _record(times, mean, std, p):
    n = len(times)
    return MeasurementRecord(np.asarray(times), np.zeros(n), np.asarray(mean), np.asarray(std), "steady", p)


def test_record_separation_needs_common_grid(steady_params):
    a = _record([1.0, 2.0], [0, 1], [0.1, 0.1], steady_params)
    b = _record([1.0, 3.0], [0, 0], [0.1, 0.1], steady_params)
    with pytest.raises(ValueError):
        record_separation(a, b)
    assert record_separation(a, _record([1.0, 2.0], [0, 0], [0.1, 0.1], steady_params)) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        _record([1.0], [0.0], [-1.0], steady_params)
    np.testing.assert_allclose(a.tau, a.times / steady_params.tau_meas)


def test_qnd_report():
    p = SystemParams(g=0.1, G=0.1, delta_omega=0.13, gamma=4e-5, n_th=2.0, kappa_minus=1e-4)
    r = qnd_report(p)
    assert r.cooperativity == pytest.approx(1000)
    assert r.cooperativity_needed == pytest.approx(500)
    assert r.cooperativity_ok
    assert r.margin_kappa_minus == pytest.approx(100)
    assert r.margin_mech == pytest.approx(0.01 / (4e-5 * 5))
    assert r.ok
    assert any("C_1" in line for line in r.lines())
    assert not qnd_report(p.with_(gamma=1e-3)).ok
    ideal = qnd_report(SystemParams(g=0.1, G=0.1, delta_omega=0.13))
    assert math.isinf(ideal.cooperativity) and ideal.ok


def test_dissipation_rate_helpers():
    p = reference_dissipative_params(0.0)
    gam = gamma_for_cooperativity(100 * 201, p)
    assert qnd_report(p.with_(gamma=gam)).cooperativity == pytest.approx(100 * 201)
    gv = gamma_violating(p)
    assert gv * 201 == pytest.approx(10 * p.g**2 / p.kappa_plus)
    assert not qnd_report(p.with_(gamma=gv)).cooperativity_ok


def test_ramp_ordering():
    p = reference_ramp_params()
    rep = ramp_ordering(p)
    assert rep.ratios["B_final/kappa_plus"] == pytest.approx(math.hypot(10, 1))
    assert rep.ratios["tau_meas/t_ramp"] == pytest.approx(10)
    assert rep.ok
    fast = reference_ramp_params(t_f=5.0)
    assert not ramp_ordering(fast).ok
    assert any("WARN" in line for line in ramp_ordering(fast).lines())
    with pytest.raises(ValueError):
        ramp_ordering(p.with_(G=5.0))


def test_measurement_model_spaces():
    p = SystemParams(g=0.01, G=0.1, delta_omega=0.13)
    L, rho0 = measurement_model(p, 2, Truncation(n_plus=3))
    assert L.space.size == 3 * 3
    assert rho0.matrix[L.space.index((0, 0, 2)), L.space.index((0, 0, 2))] == 1
    dis = p.with_(gamma=1e-4, n_th=1.0)
    cache = {}
    La, _ = measurement_model(dis, 1, Truncation(n_plus=2, n_tot_max=3), cache=cache)
    Lb, _ = measurement_model(dis, 2, Truncation(n_plus=2, n_tot_max=3), cache=cache)
    assert La is Lb
    with pytest.raises(ValueError):
        measurement_model(dis, 4, Truncation(n_tot_max=3))
    with pytest.raises(ValueError):
        measurement_model(p, -1)


def test_estimator_input_checks(steady_params):
    L, rho0 = measurement_model(steady_params, 1)
    with pytest.raises(ValueError):
        estimator_statistics(L, rho0, steady_params, [0.0, 1.0])
    with pytest.warns(RuntimeWarning, match="alpha"):
        estimator_statistics(L, rho0, steady_params.with_(alpha=1.0), [10.0])


def test_zero_coupling_gives_vacuum_floor():
    p = SystemParams(g=0.0, G=0.1, delta_omega=0.13)
    L, rho0 = measurement_model(p, 1)
    T = np.array([0.5, 5.0, 50.0])
    with pytest.warns(RuntimeWarning, match="prefactor"):
        rec = estimator_statistics(L, rho0, p, T)
    assert np.isnan(rec.n_meas_mean).all() and np.isnan(rec.n_meas_std).all()
    np.testing.assert_allclose(rec.X_mean_avg, 0, atol=1e-15)
    np.testing.assert_allclose(rec.X_std_avg, current_floor(T), rtol=1e-12)


def test_homodyne_mean_routes_and_adiabatic_limit(steady_params):
    p = steady_params
    L, rho0 = measurement_model(p, 1)
    t = np.array([0.5, 20.0]) * p.tau_meas
    tr = evolve(L, rho0, t, {"c_plus": annihilator(L.space, "plus")}, store_states=True)
    by_record = homodyne_mean(tr, p)
    tr.expectations.clear()
    np.testing.assert_allclose(homodyne_mean(tr, p), by_record, rtol=1e-12)
    # thermalized: the primary mode follows the reduced prediction
    assert by_record[-1] == pytest.approx(reduced_homodyne_mean(steady_jc(1, p), p), rel=1e-3)
    tr.states = None
    with pytest.raises(ValueError):
        homodyne_mean(tr, p)


def test_estimator_means_approach_long_time_values(steady_params):
    p = steady_params
    times = np.array([1.0, 20.0]) * p.tau_meas
    recs = simulate_estimator(p, (0, 1, 2), times)
    assert recs[0].n_meas_mean[-1] == pytest.approx(0, abs=1e-9)
    for n in (1, 2):
        assert recs[n].n_meas_mean[-1] == pytest.approx(REFERENCE_LONG_TIME[n], rel=0.05)
        # a std at least the vacuum floor, shrinking with integration time
        assert (recs[n].n_meas_std >= noise_floor(p, times) * (1 - 1e-9)).all()
        assert recs[n].n_meas_std[1] < recs[n].n_meas_std[0]
        np.testing.assert_allclose(recs[n].extra["n_tot"].real, n, atol=1e-9)


def _ramp_oracle(params, n_b, rtol=1e-10):
    """DOP853 integration of the master equation through the ramp, H affine in G."""
    sp = make_space((3, n_b + 1, n_b + 1), n_tot_max=n_b, n_tot_min=n_b)
    H0 = build_h_eff(sp, params, 0.0)
    H1 = build_h_eff(sp, params, 1.0).matrix - H0.matrix
    D = build_dissipators(sp, params)
    n = sp.size

    def rhs(t, y):
        H = H0.matrix + params.G_at(t) * H1
        return lindblad_rhs(type(H0)(sp, H), D, y.reshape(n, n)).ravel()

    rho0 = fock_state(sp, (0, 0, n_b)).matrix.astype(complex).ravel()
    sol = solve_ivp(rhs, (0, params.G.duration), rho0, method="DOP853", rtol=rtol, atol=1e-12)
    return spin_direction(DensityMatrix(sp, sol.y[:, -1].reshape(n, n)))


def test_ramp_end_direction_matches_ode_oracle():
    p = reference_ramp_params()
    vec_o, angle_o = _ramp_oracle(p, 1)
    L, rho0 = measurement_model(p, 1, n_slices=4096)
    vec, angle = spin_direction(evolve(L, rho0, [p.G.duration]).states[-1])
    assert angle == pytest.approx(angle_o, abs=0.01)
    np.testing.assert_allclose(vec, vec_o, atol=2e-5)
    # both stay within the ~10 degree cone the start-of-ramp field leaves
    assert angle < 10


def test_spin_direction_of_fock_states():
    sp = make_space((1, 3, 3), n_tot_max=2)
    vec, angle = spin_direction(fock_state(sp, (0, 0, 2)))
    np.testing.assert_allclose(vec, [0, 0, 1], atol=1e-12)
    assert angle == pytest.approx(90)
    vec0, angle0 = spin_direction(fock_state(sp, (0, 0, 0)))
    assert np.linalg.norm(vec0) == 0 and math.isnan(angle0)
