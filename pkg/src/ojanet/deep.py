"""Deep residual network of winner-take-all dictionaries.

Each layer projects the current residual on its best atom and passes the
remainder down, so the residual energy after L layers is the input energy
times the product of (1 - cos^2) over the layers.  The reconstruction is
the sum of the per-layer projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    DecompositionTrace,
    DeepModel,
    DimensionError,
    Dictionary,
    TrainConfig,
    as_vector,
    inner,
    sqnorms,
    stack_samples,
)
from .selection import residual_step, select_batch
from .shallow import EmptyClusterError, TrainReport, init_atoms, leading_eigenvector, train_layer

log = logging.getLogger(__name__)

CONVERGED_NORM = 1e-12


def decompose(x, model: DeepModel) -> DecompositionTrace:
    x = as_vector(x)
    if x.shape[0] != model.dim:
        raise DimensionError(f"vector has length {x.shape[0]}, model has dim {model.dim}")
    r = x.copy()
    trace = DecompositionTrace([], [r], [], [float(sqnorms(r))])
    if not r.any():
        trace.converged_at = 0
    for layer in model.layers:
        p, r, a = residual_step(r, layer)
        trace.projections.append(p)
        trace.residuals.append(r)
        trace.assignments.append(a)
        trace.energies.append(float(sqnorms(r)))
        if trace.converged_at is None and not r.any():
            trace.converged_at = len(trace.projections)
    return trace


def flatten_template(trace: DecompositionTrace) -> np.ndarray:
    """Sum of the per-layer projections, accumulated in layer order."""
    t = np.zeros_like(trace.residuals[0])
    for p in trace.projections:
        t = t + p
    return t


def reconstruct_codes(indices: np.ndarray, coefficients: np.ndarray, model: DeepModel) -> np.ndarray:
    """Rebuild templates from per-layer (index, coefficient) codes.

    Accumulates exactly like ``flatten_template`` so both agree bit for bit.
    """
    indices = np.asarray(indices, dtype=np.intp).reshape(-1, model.depth)
    coefficients = np.asarray(coefficients, dtype=np.float64).reshape(-1, model.depth)
    t = np.zeros((indices.shape[0], model.dim))
    for l, layer in enumerate(model.layers):
        t = t + coefficients[:, l, None] * layer.atoms[indices[:, l]]
    return t


@dataclass
class BatchDecomposition:
    indices: np.ndarray        # (N, L) selected atom per layer
    coefficients: np.ndarray   # (N, L)
    cos_sq: np.ndarray         # (N, L)
    energies: np.ndarray       # (N, L + 1) residual energy after each layer, column 0 = input
    residual: np.ndarray       # (N, D) final residual

    @property
    def projection_energies(self) -> np.ndarray:
        return self.energies[:, :-1] * self.cos_sq

    def template(self, X: np.ndarray) -> np.ndarray:
        return X - self.residual


def decompose_batch(samples, model: DeepModel, depth: int | None = None) -> BatchDecomposition:
    """Vectorized ``decompose`` over the rows of ``samples`` using the first ``depth`` layers."""
    X = stack_samples(samples)
    if X.shape[1] != model.dim:
        raise DimensionError(f"samples have width {X.shape[1]}, model has dim {model.dim}")
    depth = model.depth if depth is None else depth
    n = X.shape[0]
    idx = np.zeros((n, depth), dtype=np.intp)
    coef = np.zeros((n, depth))
    cos = np.zeros((n, depth))
    en = np.zeros((n, depth + 1))
    R = X.copy()
    en[:, 0] = sqnorms(R)
    for l, layer in enumerate(model.layers[:depth]):
        i, c, cs, _ = select_batch(R, layer)
        R = R - c[:, None] * layer.atoms[i]
        idx[:, l], coef[:, l], cos[:, l] = i, c, cs
        en[:, l + 1] = sqnorms(R)
    return BatchDecomposition(idx, coef, cos, en, R)


def train_deep(samples, config: TrainConfig) -> tuple[DeepModel, TrainReport]:
    """Greedy layerwise training, each layer fit on the residuals of the previous ones."""
    X = stack_samples(samples)
    n, dim = X.shape
    k = config.effective_k(dim)
    if n < k:
        raise ValueError(f"need at least K={k} samples, got {n}")
    total = float(sqnorms(X).sum())
    report = TrainReport()
    layers: list[Dictionary] = []
    R = X.copy()
    for l in range(config.depth):
        seed = config.seed + l
        rn = sqnorms(R)
        active = rn >= CONVERGED_NORM**2
        if not active.any():
            rng = np.random.default_rng(seed)
            d = Dictionary(rng.standard_normal((k, dim)))
            report.losses.append([])
            report.converged.append(True)
            report.untrained_layers.append(l)
            log.info("layer %d: all residuals vanished, left untrained", l + 1)
        else:
            d, losses, converged, events = train_layer(
                R, k, config, seed, active=None if active.all() else active)
            report.losses.append(losses)
            report.converged.append(converged)
            report.events.update(events)
            log.info("layer %d: %d epochs, mean loss %.6g", l + 1, len(losses) - 1, losses[-1])
        layers.append(d)
        i, c, _, _ = select_batch(R, d)
        P = c[:, None] * d.atoms[i]
        report.level_energy.append(float(sqnorms(P).sum()) / total if total else 0.0)
        R = R - P
    return DeepModel(layers, config), report


def reconstruct_multi(samples, dictionary: Dictionary) -> np.ndarray:
    """Sum of the projections of each row on every atom of the dictionary."""
    X = stack_samples(samples)
    coefs = inner(X, dictionary.atoms) / dictionary.squared_norms
    return coefs @ dictionary.atoms


def _gram_schmidt(atoms: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.array(atoms, dtype=np.float64)
    for k in range(out.shape[0]):
        for _ in range(10):
            v = out[k].copy()
            for j in range(k):
                v -= (v @ out[j]) * out[j]
            nv = np.linalg.norm(v)
            if nv > 1e-8 * max(1.0, np.linalg.norm(out[k])):
                out[k] = v / nv
                break
            out[k] = rng.standard_normal(out.shape[1])
        else:
            raise DimensionError("could not build an orthonormal starting set")
    return out


def fit_layer_multi_atom(samples, k: int, passes: int = 3, seed: int = 0,
                         init: np.ndarray | None = None) -> Dictionary:
    """Coordinate scheme for a layer whose samples use all K atoms at once.

    Each sweep refits atom k' as the leading principal direction of the
    inputs minus their projections on the other atoms.  Starting from an
    orthonormal set, the refit atom stays orthogonal to the others.
    """
    X = stack_samples(samples)
    n, dim = X.shape
    if k < 1 or k > dim:
        raise ValueError(f"need 1 <= K <= D, got K={k}, D={dim}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    rng = np.random.default_rng(seed)
    atoms = init_atoms(X, k, rng) if init is None else np.array(init, dtype=np.float64)
    if atoms.shape != (k, dim):
        raise DimensionError(f"init must have shape {(k, dim)}, got {atoms.shape}")
    if k > 1:
        atoms = _gram_schmidt(atoms, rng)
    for _ in range(passes):
        for kk in range(k):
            others = np.delete(atoms, kk, axis=0)
            if others.shape[0]:
                coefs = inner(X, others) / sqnorms(others)
                Y = X - coefs @ others
            else:
                Y = X
            used = sqnorms(Y) > CONVERGED_NORM**2
            try:
                if not used.any():
                    raise EmptyClusterError
                atoms[kk], _ = leading_eigenvector(Y[used], atoms[kk])
            except EmptyClusterError:
                full = sqnorms(X - reconstruct_multi(X, Dictionary(atoms)))
                far = int(np.argmax(full))
                if full[far] > 0.0:
                    atoms[kk] = Y[far] if Y[far].any() else X[far]
                    log.info("multi-atom slot %d reinitialized from sample %d", kk, far)
    return Dictionary(atoms)

