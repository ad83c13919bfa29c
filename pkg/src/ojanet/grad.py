"""Exact gradient of the deep residual loss ||R^(L)||^2 w.r.t. the selected atoms.

Selection is piecewise constant, so derivatives are taken with the chosen
atom of every layer held fixed.  Jacobians are in numerator layout:
``J[i, j] = d out_i / d phi_j``.

For layer l with input residual R and selected atom phi (s = ||phi||^2,
c = <R, phi>) the projection Jacobian is

    dP/dphi = (c I + phi R^T) / s - 2 c phi phi^T / s^2

and every later layer j deflates it: A <- A - phi_j phi_j^T A / s_j.  Then
dR^(L)/dphi^(l) = -A_{l,L} and the gradient is -2 A_{l,L}^T R^(L).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Atom, DeepModel, Dictionary, DimensionError, TrainConfig, as_vector, sqnorms
from .deep import decompose, decompose_batch
from .selection import scores

TIE_RTOL = 1e-12


class TieAtSelectionWarning(UserWarning):
    pass


@dataclass
class JacobianBlock:
    matrix: np.ndarray
    layer_pair: tuple[int, int]


def _vec(atom) -> np.ndarray:
    return atom.values if isinstance(atom, Atom) else as_vector(atom)


def jacobian_init(r_prev, atom, layer: int = 0) -> JacobianBlock:
    """d P / d phi for one layer, P = <R, phi> phi / ||phi||^2."""
    r = as_vector(r_prev)
    phi = _vec(atom)
    if r.shape != phi.shape:
        raise DimensionError(f"residual has length {r.shape[0]}, atom has length {phi.shape[0]}")
    s = float(phi @ phi)
    c = float(r @ phi)
    m = (c * np.eye(phi.shape[0]) + np.outer(phi, r)) / s - 2.0 * c * np.outer(phi, phi) / s**2
    return JacobianBlock(m, (layer, layer))


def jacobian_propagate(block: JacobianBlock, atom_next) -> JacobianBlock:
    """Push a block through the next layer's projection (rank-one deflation)."""
    phi = _vec(atom_next)
    a = block.matrix
    m = a - np.outer(phi, phi @ a) / float(phi @ phi)
    i, j = block.layer_pair
    return JacobianBlock(m, (i, j + 1))


@dataclass
class LossGradient:
    loss: float
    indices: list[int]
    selected: list[np.ndarray]
    tie: bool = False

    def full(self, model: DeepModel) -> list[np.ndarray]:
        """Per-layer (K, D) gradients; rows of unselected atoms are zero."""
        out = []
        for layer, k, g in zip(model.layers, self.indices, self.selected):
            G = np.zeros_like(layer.atoms)
            G[k] = g
            out.append(G)
        return out


def _has_tie(r: np.ndarray, layer: Dictionary) -> bool:
    if layer.count < 2 or not r.any():
        return False
    s = np.sort(scores(r, layer))
    return s[-1] - s[-2] <= TIE_RTOL * s[-1]


def loss_gradient(x, model: DeepModel) -> LossGradient:
    trace = decompose(x, model)
    r_final = trace.residuals[-1]
    indices = [a.atom_index for a in trace.assignments]
    atoms = [layer.atoms[k] for layer, k in zip(model.layers, indices)]
    tie = any(_has_tie(trace.residuals[l], layer) for l, layer in enumerate(model.layers))
    if tie:
        warnings.warn("argmax tie along the selection path; gradient follows the lowest-index branch",
                      TieAtSelectionWarning, stacklevel=2)
    grads = []
    for l in range(model.depth):
        block = jacobian_init(trace.residuals[l], atoms[l], l)
        for j in range(l + 1, model.depth):
            block = jacobian_propagate(block, atoms[j])
        grads.append(2.0 * (-block.matrix).T @ r_final)
    return LossGradient(float(r_final @ r_final), indices, grads, tie)


def pinned_residual(x, atoms: list[np.ndarray]) -> np.ndarray:
    """Final residual when each layer's atom is fixed in advance."""
    r = as_vector(x).copy()
    for phi in atoms:
        r = r - (r @ phi) / (phi @ phi) * phi
    return r


def finite_difference_gradient(x, model: DeepModel, indices: list[int] | None = None) -> list[np.ndarray]:
    """Central differences of ||R^(L)||^2 with selections pinned.

    Step per coordinate is 1e-5 * max(1, |phi_i|).
    """
    x = as_vector(x)
    if indices is None:
        indices = [a.atom_index for a in decompose(x, model).assignments]
    atoms = [layer.atoms[k].copy() for layer, k in zip(model.layers, indices)]
    out = []
    for l in range(len(atoms)):
        g = np.zeros_like(atoms[l])
        for i in range(g.shape[0]):
            h = 1e-5 * max(1.0, abs(atoms[l][i]))
            orig = atoms[l][i]
            atoms[l][i] = orig + h
            rp = pinned_residual(x, atoms)
            atoms[l][i] = orig - h
            rm = pinned_residual(x, atoms)
            atoms[l][i] = orig
            g[i] = (rp @ rp - rm @ rm) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale <= floor:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def random_model(rng: np.random.Generator, dim: int, depth: int, k: int) -> DeepModel:
    return DeepModel([Dictionary(rng.standard_normal((k, dim))) for _ in range(depth)],
                     TrainConfig(k_per_layer=k, depth=depth))


def gradcheck(x, model: DeepModel) -> float:
    """Largest per-layer relative error between the recursion and finite differences."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TieAtSelectionWarning)
        g = loss_gradient(x, model)
    fd = finite_difference_gradient(x, model, g.indices)
    return max(relative_error(a, b) for a, b in zip(g.selected, fd))


def batch_gradients(samples, model: DeepModel) -> tuple[float, list[np.ndarray]]:
    """Mean loss and its gradient w.r.t. every atom, selections pinned per sample.

    Uses vector-Jacobian products (O(L D) per sample) instead of forming
    the D x D blocks.
    """
    b = decompose_batch(samples, model)
    X = np.asarray(samples, dtype=np.float64)
    n = X.shape[0]
    residuals = [X]
    R = X
    for l, layer in enumerate(model.layers):
        R = R - b.coefficients[:, l, None] * layer.atoms[b.indices[:, l]]
        residuals.append(R)
    u = residuals[-1]
    grads = [np.zeros_like(layer.atoms) for layer in model.layers]
    for l in range(model.depth - 1, -1, -1):
        layer = model.layers[l]
        phi = layer.atoms[b.indices[:, l]]
        s = layer.squared_norms[b.indices[:, l]][:, None]
        rp = residuals[l]
        c = np.einsum("nd,nd->n", rp, phi)[:, None]
        pu = np.einsum("nd,nd->n", phi, u)[:, None]
        # (dP/dphi)^T u, then d loss = -2 of it
        g = -2.0 * ((c * u + rp * pu) / s - 2.0 * c * phi * pu / s**2)
        np.add.at(grads[l], b.indices[:, l], g / n)
        u = u - phi * pu / s
    return float(b.energies[:, -1].mean()), grads


def refine_joint(samples, model: DeepModel, learning_rate: float = 0.1, epochs: int = 10,
                 max_halvings: int = 30) -> tuple[DeepModel, list[float]]:
    """Gradient descent on the mean deep loss, re-selecting atoms every epoch.

    A step that increases the loss is halved until it does not (at most
    ``max_halvings`` times); if none helps, refinement stops.
    """
    X = np.asarray(samples, dtype=np.float64)
    loss, grads = batch_gradients(X, model)
    losses = [loss]
    lr = learning_rate
    for _ in range(epochs):
        for _ in range(max_halvings + 1):
            try:
                trial = DeepModel([Dictionary(layer.atoms - lr * g) for layer, g in zip(model.layers, grads)],
                                  model.config)
            except ValueError:
                lr *= 0.5
                continue
            new = float(decompose_batch(X, trial).energies[:, -1].mean())
            if new <= loss:
                break
            lr *= 0.5
        else:
            break
        model = trial
        loss, grads = batch_gradients(X, model)
        losses.append(loss)
    return model, losses


def descent_holds(x, model: DeepModel, layer: int, max_halvings: int = 30) -> bool:
    """True when some step along -g (halved up to 30 times) does not raise the loss."""
    g = loss_gradient(x, model)
    base = g.loss
    step = 1.0
    for _ in range(max_halvings + 1):
        layers = list(model.layers)
        atoms = layers[layer].atoms.copy()
        atoms[g.indices[layer]] -= step * g.selected[layer]
        if sqnorms(atoms).min() > 0:
            layers[layer] = Dictionary(atoms)
            trial = decompose(x, DeepModel(layers, model.config)).energies[-1]
            if trial <= base:
                return True
        step *= 0.5
    return False
