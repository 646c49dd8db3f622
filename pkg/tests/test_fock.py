import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shelving_qnd.fock import (DensityMatrix, Operator, annihilator, fock_state, identity, make_space,
                               n_tot_op, number_op, with_lower_block)


def test_basis_is_lexicographic_and_capped():
    sp = make_space((2, 3, 3), n_tot_max=2)
    states = [sp.state(i) for i in range(sp.size)]
    assert states == sorted(states)
    assert all(s[1] + s[2] <= 2 for s in states)
    # 2 primary levels x 6 (minus, mech) pairs with sum <= 2
    assert sp.size == 12
    assert sp.index((1, 0, 2)) == states.index((1, 0, 2))


def test_block_space_keeps_one_excitation_number():
    sp = make_space((3, 4, 4), n_tot_max=3, n_tot_min=3)
    assert set(sp.n_tot) == {3}
    assert sp.size == 3 * 4


def test_cap_unreachable_is_flagged():
    assert make_space((2, 2, 2), n_tot_max=3).cap_exceeds_dims
    assert not make_space((2, 4, 4), n_tot_max=3).cap_exceeds_dims


@pytest.mark.parametrize("dims,kw", [((2, 2), {}), ((0, 2, 2), {}), ((2, 2, 2), {"n_tot_max": -1}),
                                     ((2, 2, 2), {"n_tot_min": -1}), ((2, 2, 2), {"n_tot_min": 5})])
def test_bad_spaces_raise(dims, kw):
    with pytest.raises(ValueError):
        make_space(dims, **kw)


def test_mode_aliases_and_errors():
    sp = make_space((2, 2, 2))
    assert sp.mode("c+") == sp.mode("plus") == 0
    assert sp.mode("b") == 2
    with pytest.raises(ValueError):
        sp.mode("photon")
    with pytest.raises(ValueError):
        sp.index((5, 0, 0))


def test_annihilator_matrix_elements():
    sp = make_space((3, 2, 2))
    a = annihilator(sp, "plus").matrix
    i, j = sp.index((1, 1, 0)), sp.index((2, 1, 0))
    assert a[i, j] == pytest.approx(np.sqrt(2))
    assert np.count_nonzero(a) == 2 * 4


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), st.integers(0, 5))
def test_number_operator_is_adag_a(dims, cap):
    sp = make_space(dims, n_tot_max=cap)
    for mode in ("plus", "minus", "mech"):
        a = annihilator(sp, mode)
        np.testing.assert_allclose((a.dag @ a).matrix, number_op(sp, mode).matrix, atol=1e-12)
    np.testing.assert_allclose(n_tot_op(sp).matrix,
                               (number_op(sp, "minus") + number_op(sp, "mech")).matrix, atol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6))
def test_truncated_commutator(d):
    sp = make_space((d, 1, 1))
    a = annihilator(sp, "plus")
    comm = (a @ a.dag - a.dag @ a).matrix
    expected = np.eye(d)
    expected[-1, -1] = 1 - d
    np.testing.assert_allclose(comm, expected, atol=1e-12)


def test_with_lower_block_restricts_exactly():
    sp = make_space((2, 3, 3), n_tot_max=2, n_tot_min=2)
    work, keep = with_lower_block(sp)
    assert work.n_tot_min == 1 and keep is not None
    assert [work.state(k) for k in keep] == [sp.state(i) for i in range(sp.size)]
    # b^dag c_- inside the block needs the N-1 block as an intermediate
    cm, b = annihilator(work, "minus"), annihilator(work, "mech")
    jp = (b.dag @ cm).matrix[np.ix_(keep, keep)]
    naive = (annihilator(sp, "mech").dag @ annihilator(sp, "minus")).matrix
    assert np.abs(jp).max() > 1
    assert np.abs(naive).max() == 0
    assert with_lower_block(make_space((2, 2, 2))) == (make_space((2, 2, 2)), None)


def test_operator_algebra_and_spaces():
    sp = make_space((2, 2, 2))
    a = annihilator(sp, "plus")
    assert not ((2 * a) / 2 - a).matrix.any()
    assert (a + a.dag).is_hermitian()
    with pytest.raises(ValueError):
        a @ annihilator(make_space((3, 2, 2)), "plus")
    np.testing.assert_allclose(a.commutator(a.dag).matrix, (a @ a.dag - a.dag @ a).matrix)
    assert (identity(sp) @ a).matrix.tolist() == a.matrix.tolist()


def test_density_matrix_checks():
    sp = make_space((2, 2, 2))
    rho = fock_state(sp, (1, 0, 1))
    assert rho.check() is rho
    assert rho.purity() == pytest.approx(1.0)
    bad = DensityMatrix(sp, 2 * rho.matrix)
    assert any("trace" in v for v in bad.violations())
    neg = DensityMatrix(sp, rho.matrix - 0.5 * fock_state(sp, (0, 0, 0)).matrix
                        + 0.5 * fock_state(sp, (1, 1, 1)).matrix)
    assert any("negative" in v for v in neg.violations())
    with pytest.raises(ValueError):
        bad.check()
    assert isinstance(rho, Operator)
