"""Winner-take-all atom selection and the one-step projection / residual.

The selected atom maximizes <x, phi_k>^2 / ||phi_k||^2.  Dividing by
||x||^2 (to get cos^2) does not change the argmax, so scores are compared
without it and cos^2 is only formed for the winner.
"""

from __future__ import annotations

import numpy as np

from .core import Assignment, DimensionError, Dictionary, ZeroInputError, as_vector, inner, sqnorms


def scores(x: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """Squared projection energy of x on every atom."""
    ip = inner(x, dictionary.atoms)
    return ip * (ip / dictionary.squared_norms)


def _check(x, dictionary: Dictionary) -> np.ndarray:
    x = as_vector(x)
    if x.shape[0] != dictionary.dim:
        raise DimensionError(f"vector has length {x.shape[0]}, dictionary has dim {dictionary.dim}")
    return x


def select_atom(x, dictionary: Dictionary) -> Assignment:
    x = _check(x, dictionary)
    xx = float(sqnorms(x))
    if xx == 0.0:
        raise ZeroInputError("cannot select an atom for a zero vector")
    ip = inner(x, dictionary.atoms)
    coefs = ip / dictionary.squared_norms
    s = ip * coefs
    k = int(np.argmax(s))  # first maximum: lowest index wins ties
    coef = float(coefs[k])
    cos_sq = min(1.0, float(s[k]) / xx)
    return Assignment(k, coef, cos_sq)


def shallow_error(x, dictionary: Dictionary) -> float:
    """||x||^2 (1 - cos^2) for the selected atom; 0 for a zero input."""
    x = _check(x, dictionary)
    try:
        a = select_atom(x, dictionary)
    except ZeroInputError:
        return 0.0
    return float(sqnorms(x)) * (1.0 - a.cos_sq)


def residual_step(x, dictionary: Dictionary) -> tuple[np.ndarray, np.ndarray, Assignment]:
    """Project x on its selected atom and return (projection, residual, assignment)."""
    x = _check(x, dictionary)
    try:
        a = select_atom(x, dictionary)
    except ZeroInputError:
        z = np.zeros_like(x)
        return z, z.copy(), Assignment(0, 0.0, 0.0, zero_input=True)
    projection = a.coefficient * dictionary.atoms[a.atom_index]
    return projection, x - projection, a


def select_batch(X: np.ndarray, dictionary: Dictionary) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized selection over the rows of X.

    Returns (indices, coefficients, cos_sq, zero_mask).  Zero rows get index
    0, coefficient 0 and cos_sq 0, and are flagged in ``zero_mask``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dictionary.dim:
        raise DimensionError(f"samples of shape {X.shape} do not match dictionary dim {dictionary.dim}")
    ip = inner(X, dictionary.atoms)
    coefs = ip / dictionary.squared_norms
    s = ip * coefs
    idx = np.argmax(s, axis=1) if X.shape[0] else np.zeros(0, dtype=np.intp)
    rows = np.arange(X.shape[0])
    xx = sqnorms(X)
    zero = xx == 0.0
    coef = coefs[rows, idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_sq = np.minimum(1.0, s[rows, idx] / xx)
    idx[zero] = 0
    coef[zero] = 0.0
    cos_sq[zero] = 0.0
    return idx, coef, cos_sq, zero


def shallow_errors(X: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """Per-row shallow error, vectorized."""
    X = np.asarray(X, dtype=np.float64)
    _, _, cos_sq, _ = select_batch(X, dictionary)
    return sqnorms(X) * (1.0 - cos_sq)


def residual_energies(X: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """Per-row ||x - alpha phi||^2, formed from the residual itself.

    Same quantity as ``shallow_errors`` but without the cancellation in
    1 - cos^2, so it keeps resolving once the error drops below ~1e-16 ||x||^2.
    """
    X = np.asarray(X, dtype=np.float64)
    idx, coef, _, _ = select_batch(X, dictionary)
    return sqnorms(X - coef[:, None] * dictionary.atoms[idx])
