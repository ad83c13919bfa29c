import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ojanet import Dictionary, ZeroInputError, residual_step, select_atom, shallow_error
from ojanet.selection import residual_energies, select_batch, shallow_errors


def brute_force_select(x, atoms):
    best, best_k = -1.0, -1
    for k, a in enumerate(atoms):
        s = float(np.dot(x, a)) ** 2 / float(np.dot(a, a))
        if s > best:
            best, best_k = s, k
    return best_k


def test_select_axis_example():
    a = select_atom((1, 2), Dictionary([(1, 0), (0, 1)]))
    assert a.atom_index == 1
    assert a.coefficient == pytest.approx(2.0)
    assert a.cos_sq == pytest.approx(4 / 5)


def test_select_tie_goes_to_lowest_index():
    a = select_atom((1, 0), Dictionary([(1, 0), (-1, 0)]))
    assert a.atom_index == 0
    assert a.cos_sq == 1.0


def test_select_matches_exhaustive_scan(rng):
    atoms = rng.standard_normal((12, 5))
    d = Dictionary(atoms)
    for x in rng.standard_normal((50, 5)):
        assert select_atom(x, d).atom_index == brute_force_select(x, atoms)


def test_select_zero_input_signals():
    with pytest.raises(ZeroInputError):
        select_atom((0, 0), Dictionary([(1, 0)]))


def test_select_batch_agrees_with_single(rng):
    d = Dictionary(rng.standard_normal((7, 6)))
    X = rng.standard_normal((40, 6))
    X[3] = 0.0
    idx, coef, cos_sq, zero = select_batch(X, d)
    assert zero.tolist() == [i == 3 for i in range(40)]
    for n, x in enumerate(X):
        if n == 3:
            assert (idx[n], coef[n], cos_sq[n]) == (0, 0.0, 0.0)
            continue
        a = select_atom(x, d)
        assert (idx[n], coef[n], cos_sq[n]) == (a.atom_index, a.coefficient, a.cos_sq)


@pytest.mark.parametrize("x, atoms, expected", [
    ((1, 0), [(2, 0), (0, 1)], 0.0),
    ((1, 1), [(1, 0)], 1.0),
    ((0, 0), [(1, 0)], 0.0),
])
def test_shallow_error_examples(x, atoms, expected):
    assert shallow_error(x, Dictionary(atoms)) == pytest.approx(expected, abs=1e-15)


def test_shallow_error_matches_direct_residual(rng):
    for _ in range(100):
        d = int(rng.integers(2, 12))
        atoms = rng.standard_normal((int(rng.integers(1, 10)), d))
        x = rng.standard_normal(d) * rng.uniform(0.1, 10)
        k = brute_force_select(x, atoms)
        alpha = np.dot(x, atoms[k]) / np.dot(atoms[k], atoms[k])
        direct = float(np.sum((x - alpha * atoms[k]) ** 2))
        assert abs(shallow_error(x, Dictionary(atoms)) - direct) <= 1e-10 * np.dot(x, x)


def test_vectorized_errors_agree(rng):
    d = Dictionary(rng.standard_normal((5, 4)))
    X = rng.standard_normal((30, 4))
    singles = np.array([shallow_error(x, d) for x in X])
    np.testing.assert_allclose(shallow_errors(X, d), singles, rtol=0, atol=1e-14)
    np.testing.assert_allclose(residual_energies(X, d), singles, rtol=0, atol=1e-12)


def test_residual_step_examples():
    p, r, a = residual_step((3, 4), Dictionary([(1, 0)]))
    np.testing.assert_array_equal(p, [3, 0])
    np.testing.assert_array_equal(r, [0, 4])
    p, r, a = residual_step((1, 1), Dictionary([(1, 1)]))
    np.testing.assert_array_equal(r, [0, 0])


def test_residual_step_zero_input_is_flagged():
    p, r, a = residual_step((0.0, 0.0), Dictionary([(1, 0)]))
    assert a.zero_input
    assert not p.any() and not r.any()


def test_residual_energy_identity(rng):
    for _ in range(100):
        x = rng.standard_normal(10)
        d = Dictionary(rng.standard_normal((6, 10)))
        _, r, a = residual_step(x, d)
        assert abs(r @ r - (x @ x) * (1 - a.cos_sq)) <= 1e-12 * (x @ x)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(x=arrays(np.float64, 6, elements=finite), seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8))
def test_step_invariants(x, seed, k):
    atoms = np.random.default_rng(seed).standard_normal((k, 6))
    d = Dictionary(atoms)
    p, r, a = residual_step(x, d)
    xx = float(x @ x)
    # Pythagoras
    assert abs(xx - (p @ p + r @ r)) <= 1e-10 * xx + 1e-300
    # residual orthogonal to the chosen atom
    phi = atoms[a.atom_index]
    assert abs(r @ phi) <= 1e-10 * np.sqrt(xx) * np.linalg.norm(phi) + 1e-300
    # error non-negative
    assert shallow_error(x, d) >= 0.0
    # idempotence with the chosen atom alone
    single = Dictionary(phi[None, :])
    p2, _, _ = residual_step(r, single)
    assert np.all(np.abs(p2) <= 1e-10 * np.sqrt(xx) + 1e-300)


def test_error_vanishes_only_for_collinear_inputs(rng):
    atoms = rng.standard_normal((4, 3))
    d = Dictionary(atoms)
    for c in (-2.5, 0.3, 7.0):
        assert shallow_error(c * atoms[2], d) <= 1e-12 * (c * c) * (atoms[2] @ atoms[2])
    x = rng.standard_normal(3)
    assert shallow_error(x, d) > 1e-6
