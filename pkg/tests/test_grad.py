import warnings

import numpy as np
import pytest

from ojanet import DeepModel, Dictionary, TrainConfig
from ojanet.grad import (
    TieAtSelectionWarning,
    batch_gradients,
    descent_holds,
    finite_difference_gradient,
    gradcheck,
    jacobian_init,
    jacobian_propagate,
    loss_gradient,
    pinned_residual,
    random_model,
    refine_joint,
    relative_error,
)


def model_of(*layers):
    layers = [Dictionary(np.asarray(a, dtype=float)) for a in layers]
    return DeepModel(layers, TrainConfig(k_per_layer=layers[0].count, depth=len(layers)))


def projection(r, phi):
    return (r @ phi) / (phi @ phi) * phi


def fd_jacobian(f, phi, h=1e-6):
    cols = []
    for j in range(phi.shape[0]):
        e = np.zeros_like(phi)
        e[j] = h
        cols.append((f(phi + e) - f(phi - e)) / (2 * h))
    return np.array(cols).T


def test_jacobian_init_unit_axis_example():
    J = jacobian_init([1.0, 2.0], [1.0, 0.0]).matrix
    # P = (r . phi) phi / |phi|^2 around phi = e1, r = (1, 2)
    np.testing.assert_allclose(J, [[0.0, 2.0], [0.0, 1.0]])


def test_jacobian_init_matches_finite_differences(rng):
    for _ in range(20):
        r, phi = rng.standard_normal(5), rng.standard_normal(5)
        J = jacobian_init(r, phi).matrix
        np.testing.assert_allclose(J, fd_jacobian(lambda p: projection(r, p), phi), rtol=1e-6, atol=1e-8)


def test_jacobian_propagate_example():
    b = jacobian_propagate(jacobian_init([1.0, 2.0], [1.0, 0.0], 0), [0.0, 1.0])
    np.testing.assert_allclose(b.matrix, [[0.0, 2.0], [0.0, 0.0]])
    assert b.layer_pair == (0, 1)


def test_three_layer_chain_matches_finite_differences(rng):
    x = rng.standard_normal(4)
    phis = [rng.standard_normal(4) for _ in range(3)]

    def final_residual(p0):
        return pinned_residual(x, [p0, phis[1], phis[2]])

    b = jacobian_init(x, phis[0])
    for p in phis[1:]:
        b = jacobian_propagate(b, p)
    np.testing.assert_allclose(-b.matrix, fd_jacobian(final_residual, phis[0]), rtol=1e-6, atol=1e-8)


def test_loss_gradient_zero_at_exact_fit():
    g = loss_gradient([2.0, 0.0], model_of([[1.0, 0.0], [0.0, 1.0]]))
    assert g.loss == 0.0
    np.testing.assert_array_equal(g.selected[0], [0.0, 0.0])


def test_loss_gradient_matches_finite_differences(rng):
    for _ in range(20):
        m = random_model(rng, 6, 3, 4)
        assert gradcheck(rng.standard_normal(6), m) < 1e-6


def test_single_layer_gradient_is_minus_twice_oja_term(rng):
    for _ in range(10):
        x = rng.standard_normal(5)
        phi = rng.standard_normal(5)
        phi /= np.linalg.norm(phi)
        g = loss_gradient(x, model_of(phi[None, :]))
        alpha = x @ phi
        np.testing.assert_allclose(g.selected[0], -2.0 * (x * alpha - alpha**2 * phi), atol=1e-12)


def test_full_gradient_has_zero_rows_for_unselected(rng):
    m = random_model(rng, 4, 2, 3)
    g = loss_gradient(rng.standard_normal(4), m)
    for G, k in zip(g.full(m), g.indices):
        assert np.count_nonzero(np.delete(G, k, axis=0)) == 0


def test_tie_warns():
    m = model_of([[1.0, 0.0], [0.0, 1.0]])
    with pytest.warns(TieAtSelectionWarning):
        g = loss_gradient([1.0, 1.0], m)
    assert g.tie and g.indices == [0]


def test_no_warning_without_tie(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not loss_gradient([1.0, 0.2], model_of([[1.0, 0.0], [0.0, 1.0]])).tie


def test_descent_step_does_not_increase_loss(rng):
    for _ in range(10):
        m = random_model(rng, 5, 3, 3)
        x = rng.standard_normal(5)
        for layer in range(3):
            assert descent_holds(x, m, layer)


def test_batch_gradients_average_per_sample(rng):
    m = random_model(rng, 5, 3, 4)
    X = rng.standard_normal((30, 5))
    loss, grads = batch_gradients(X, m)
    expected = [np.zeros_like(l.atoms) for l in m.layers]
    losses = []
    for x in X:
        g = loss_gradient(x, m)
        losses.append(g.loss)
        for acc, G in zip(expected, g.full(m)):
            acc += G / len(X)
    assert loss == pytest.approx(np.mean(losses), rel=1e-12)
    for a, b in zip(grads, expected):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_refine_joint_never_increases_loss(rng):
    m = random_model(rng, 5, 2, 3)
    X = rng.standard_normal((60, 5))
    _, losses = refine_joint(X, m, learning_rate=0.5, epochs=15)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(2), np.full(2, 1e-13)) == 0.0


def test_finite_difference_uses_given_indices(rng):
    m = random_model(rng, 3, 1, 3)
    x = rng.standard_normal(3)
    fd = finite_difference_gradient(x, m, [2])
    g = loss_gradient(x, model_of(m.layers[0].atoms[2][None, :]))
    np.testing.assert_allclose(fd[0], g.selected[0], rtol=1e-6, atol=1e-9)
