"""Model containers: atoms, dictionaries, deep models and per-sample traces.

Atoms are stored un-normalized together with their cached squared norms.
Every formula in the package divides by the squared norm explicitly, so a
dictionary never has to be unit-normalized to be used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

RULES = ("batch_pca", "online_lambda1", "online_lambda2", "online_oja")


class OjaNetError(Exception):
    """Base class for every error raised by this package."""


class ZeroAtomError(OjaNetError, ValueError):
    pass


class DimensionError(OjaNetError, ValueError):
    pass


class ZeroInputError(OjaNetError, ValueError):
    """Raised by selection when the input vector has zero norm."""


class NotOrthogonalError(OjaNetError, ValueError):
    pass


_CHUNK_ELEMENTS = 1 << 22


def sqnorms(X: np.ndarray) -> np.ndarray:
    """Row-wise squared norms, summed with the same kernel as ``inner``."""
    X = np.asarray(X, dtype=np.float64)
    return (X * X).sum(axis=-1)


def inner(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Inner products of every row of X with every row of A, shape (N, K).

    Products are formed elementwise and reduced along the last axis, so an
    entry never depends on how many rows are batched together and
    ``inner(a, a) == sqnorms(a)`` bit for bit.  BLAS does not give either.
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if X.ndim == 1:
        return (A * X).sum(axis=-1)
    n, k = X.shape[0], A.shape[0]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMENTS // max(1, k * A.shape[1]))
    for i in range(0, n, step):
        out[i:i + step] = (X[i:i + step, None, :] * A[None, :, :]).sum(axis=-1)
    return out


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Atom:
    values: np.ndarray
    squared_norm: float

    @classmethod
    def of(cls, values) -> "Atom":
        v = as_vector(values).copy()
        sq = float(sqnorms(v))
        if not sq > 0.0 or not np.isfinite(sq):
            raise ZeroAtomError("atoms must have a finite, non-zero norm")
        v.setflags(write=False)
        return cls(v, sq)

    def __len__(self) -> int:
        return self.values.shape[0]


def _atom_values(atom) -> np.ndarray:
    return atom.values if isinstance(atom, Atom) else as_vector(atom)


class Dictionary:
    """K atoms in R^D, stored as the rows of a (K, D) array."""

    def __init__(self, atoms):
        a = np.array(atoms, dtype=np.float64, ndmin=2)
        if a.ndim != 2:
            raise DimensionError(f"atoms must form a (K, D) array, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError("a dictionary needs at least one atom of positive dimension")
        sq = sqnorms(a)
        if not np.all(np.isfinite(sq)) or np.any(sq <= 0.0):
            bad = int(np.flatnonzero(~(sq > 0.0) | ~np.isfinite(sq))[0])
            raise ZeroAtomError(f"atom {bad} has zero or non-finite norm")
        a.setflags(write=False)
        sq.setflags(write=False)
        self.atoms = a
        self.squared_norms = sq

    @property
    def count(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, k: int) -> Atom:
        return Atom(self.atoms[k], float(self.squared_norms[k]))

    def __iter__(self):
        return (self[k] for k in range(self.count))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.atoms.shape == other.atoms.shape and bool(np.array_equal(self.atoms, other.atoms))

    def __repr__(self) -> str:
        return f"Dictionary(K={self.count}, D={self.dim})"

    def normalized(self) -> "Dictionary":
        return Dictionary(self.atoms / np.sqrt(self.squared_norms)[:, None])


@dataclass
class TrainConfig:
    k_per_layer: int = 8
    depth: int = 1
    rule: str = "batch_pca"
    learning_rate: float = 0.01
    max_epochs: int = 100
    tol_rel_loss: float = 1e-10
    seed: int = 0
    increase_factor: float | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if self.k_per_layer < 1:
            raise ValueError("k_per_layer must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.tol_rel_loss > 0:
            raise ValueError("tol_rel_loss must be > 0")
        if self.rule == "online_oja" and not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0 for the oja rule")
        if self.increase_factor is not None and not self.increase_factor > 0:
            raise ValueError("increase_factor must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    def effective_k(self, dim: int) -> int:
        """Atom count per layer; round(F * D) when an increase factor is set."""
        if self.increase_factor is None:
            return self.k_per_layer
        return max(1, int(round(self.increase_factor * dim)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class DeepModel:
    layers: list[Dictionary]
    config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise DimensionError("a deep model needs at least one layer")
        dims = {layer.dim for layer in self.layers}
        if len(dims) != 1:
            raise DimensionError(f"all layers must share one dimension, got {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def k_per_layer(self) -> list[int]:
        return [layer.count for layer in self.layers]


@dataclass(frozen=True)
class Assignment:
    """Winner-take-all choice for one vector.

    ``zero_input`` marks the degenerate case of a zero vector, for which the
    index is 0 and both coefficient and cos_sq are 0.
    """

    atom_index: int
    coefficient: float
    cos_sq: float
    zero_input: bool = False


@dataclass
class DecompositionTrace:
    projections: list[np.ndarray]
    residuals: list[np.ndarray]
    assignments: list[Assignment]
    energies: list[float]
    converged_at: int | None = None

    @property
    def depth(self) -> int:
        return len(self.projections)


def project_coefficient(x, atom) -> float:
    """<x, phi> / ||phi||^2."""
    x = as_vector(x)
    phi = _atom_values(atom)
    if x.shape != phi.shape:
        raise DimensionError(f"vector has length {x.shape[0]}, atom has length {phi.shape[0]}")
    sq = atom.squared_norm if isinstance(atom, Atom) else float(sqnorms(phi))
    if not sq > 0.0:
        raise ZeroAtomError("cannot project onto a zero atom")
    return float(inner(x, phi[None, :])[0]) / sq


def check_orthogonal(basis: Dictionary, rtol: float = 1e-10) -> None:
    a = basis.atoms
    gram = inner(a, a)
    norms = np.sqrt(basis.squared_norms)
    off = np.abs(gram - np.diag(np.diag(gram))) / np.outer(norms, norms)
    if off.max(initial=0.0) > rtol:
        i, j = np.unravel_index(int(np.argmax(off)), off.shape)
        raise NotOrthogonalError(f"atoms {i} and {j} are not orthogonal (|cos| = {off[i, j]:.3g})")


def reconstruct_complete(x, basis: Dictionary) -> np.ndarray:
    """Expand x in a complete orthogonal basis: sum_k <x,phi_k>/||phi_k||^2 phi_k."""
    x = as_vector(x)
    if x.shape[0] != basis.dim:
        raise DimensionError(f"vector has length {x.shape[0]}, basis has dim {basis.dim}")
    if basis.count != basis.dim:
        raise NotOrthogonalError(f"a complete basis needs K = D, got K={basis.count}, D={basis.dim}")
    check_orthogonal(basis)
    out = np.zeros_like(x)
    for atom in basis:
        out += project_coefficient(x, atom) * atom.values
    return out


def stack_samples(samples: Sequence | np.ndarray) -> np.ndarray:
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"samples must form an (N, D) matrix, got shape {X.shape}")
    return X
