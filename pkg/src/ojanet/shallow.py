"""Single-layer dictionary learning: hard assignment plus per-cluster updates.

Batch training alternates winner-take-all assignment with a leading
eigenvector fit per cluster (a hard mixture of one-component PCA).  Online
training sweeps the samples and moves only the winning atom, using one of
the two adaptive-step rules or Oja's rule.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Atom,
    DimensionError,
    Dictionary,
    OjaNetError,
    TrainConfig,
    as_vector,
    inner,
    sqnorms,
    stack_samples,
)
from .selection import residual_energies, select_batch, shallow_errors

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
POWER_MAX_ITER = 500
POWER_TOL = 1e-12


class EmptyClusterError(OjaNetError):
    pass


class DegenerateClusterError(OjaNetError):
    pass


class NearOrthogonalMemberError(DegenerateClusterError):
    pass


@dataclass
class ClusterIndex:
    """Sample indices per atom; zero-norm samples sit in cluster 0 and are flagged."""

    members: list[np.ndarray]
    labels: np.ndarray
    zero: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class TrainReport:
    """Per-layer loss history (entry 0 is the loss at initialization)."""

    losses: list[list[float]] = field(default_factory=list)
    level_energy: list[float] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    untrained_layers: list[int] = field(default_factory=list)
    events: Counter = field(default_factory=Counter)

    @property
    def epochs(self) -> list[int]:
        return [max(len(h) - 1, 0) for h in self.losses]

    @property
    def final_loss(self) -> float:
        return self.losses[-1][-1] if self.losses and self.losses[-1] else float("nan")


def _values(atom) -> np.ndarray:
    return atom.values if isinstance(atom, Atom) else as_vector(atom)


def _cluster(samples, dim: int) -> np.ndarray:
    X = stack_samples(samples)
    if X.shape[1] != dim:
        raise DimensionError(f"cluster of width {X.shape[1]} does not match atom length {dim}")
    if X.shape[0] == 0:
        raise EmptyClusterError("cluster has no members")
    return X


def assign_all(samples, dictionary: Dictionary) -> ClusterIndex:
    idx, _, _, zero = select_batch(stack_samples(samples), dictionary)
    members = [np.flatnonzero((idx == k) & ~zero) for k in range(dictionary.count)]
    members[0] = np.flatnonzero(idx == 0)
    return ClusterIndex(members, idx, zero)


def leading_eigenvector(X: np.ndarray, start: np.ndarray, max_iter: int = POWER_MAX_ITER,
                        fallback: bool = True) -> tuple[np.ndarray, bool]:
    """Unit leading eigenvector of X^T X / n by power iteration from ``start``.

    Returns (vector, converged).  When the iteration stalls and ``fallback``
    is set, a dense symmetric eigensolve finishes the job.
    """
    n, d = X.shape
    if d <= n:
        C = (X.T @ X) / n
        matvec = C.__matmul__
    else:
        matvec = lambda v: X.T @ (X @ v) / n  # noqa: E731
    v = start / np.linalg.norm(start)
    restarted = False
    for _ in range(max_iter):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            if restarted:
                raise EmptyClusterError("cluster spans no direction")
            # start vector lies in the null space; restart from the largest member
            restarted = True
            big = X[int(np.argmax(sqnorms(X)))]
            if not big.any():
                raise EmptyClusterError("cluster members are all zero")
            v = big / np.linalg.norm(big)
            continue
        w = w / nw
        c = float(w @ v)
        v = w
        if c > 1.0 - POWER_TOL:
            return v, True
    if not fallback:
        return v, False
    log.debug("power iteration did not converge in %d steps; using dense eigensolver", max_iter)
    _, vecs = np.linalg.eigh((X.T @ X) / n)
    top = vecs[:, -1]
    if top @ v < 0:
        top = -top
    return top, False


def update_atom_pca(samples_in_cluster, atom, max_iter: int = POWER_MAX_ITER, fallback: bool = True) -> Atom:
    """Leading principal direction of the cluster, warm-started at ``atom``."""
    phi = _values(atom)
    X = _cluster(samples_in_cluster, phi.shape[0])
    v, _ = leading_eigenvector(X, phi, max_iter=max_iter, fallback=fallback)
    return Atom.of(v)


def _lambda1(X: np.ndarray, phi: np.ndarray) -> np.ndarray:
    sq = float(sqnorms(phi))
    ip = inner(X, phi[None, :])[:, 0]
    xx = sqnorms(X)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(xx > 0, ip * ip / (xx * sq), 0.0)
    total = float(w.sum())
    if total < 1e-12:
        raise DegenerateClusterError("cluster is orthogonal to its atom (sum of cos^2 vanishes)")
    alpha = ip / sq
    step = (w[:, None] * (alpha[:, None] * phi[None, :] - X)).sum(axis=0)
    return phi - step / total


def update_atom_lambda1(samples_in_cluster, atom) -> Atom:
    """cos^2-weighted step towards the cluster members.

    phi <- phi - (1 / sum cos^2) * sum cos^2 (<x,phi>/||phi||^2 phi - x),
    with both sums over the cluster members.
    """
    phi = _values(atom)
    return Atom.of(_lambda1(_cluster(samples_in_cluster, phi.shape[0]), phi))


def _lambda2(X: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, int]:
    sq = float(sqnorms(phi))
    ip = inner(X, phi[None, :])[:, 0]
    keep = np.abs(ip) >= 1e-12 * np.sqrt(sqnorms(X) * sq)
    keep &= ip != 0.0
    skipped = int((~keep).sum())
    if not keep.any():
        raise NearOrthogonalMemberError("every cluster member is orthogonal to the atom")
    new = ((sq / ip[keep])[:, None] * X[keep]).sum(axis=0) / keep.sum()
    return new, skipped


def update_atom_lambda2(samples_in_cluster, atom) -> Atom:
    """Average of the members rescaled onto the atom: mean of ||phi||^2/<x,phi> x.

    Members (near-)orthogonal to the atom would divide by zero; they are
    skipped and the average runs over the remaining ones.
    """
    phi = _values(atom)
    new, skipped = _lambda2(_cluster(samples_in_cluster, phi.shape[0]), phi)
    if skipped:
        log.info("lambda2 update skipped %d near-orthogonal member(s)", skipped)
    return Atom.of(new)


def _oja(x: np.ndarray, phi: np.ndarray, gamma: float) -> np.ndarray:
    a = float(inner(x, phi[None, :])[0]) / float(sqnorms(phi))
    return phi + gamma * (a * x - a * a * phi)


def update_atom_oja(x, atom, gamma: float) -> Atom:
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    x = as_vector(x)
    phi = _values(atom)
    if x.shape != phi.shape:
        raise DimensionError(f"vector has length {x.shape[0]}, atom has length {phi.shape[0]}")
    return Atom.of(_oja(x, phi, gamma))


def init_atoms(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K samples drawn uniformly without replacement, skipping zero rows.

    Draws that are collinear with an atom already chosen are passed over
    while other directions remain, since selection cannot tell them apart.
    Missing atoms (fewer usable samples than K) are filled with Gaussian
    directions from the same generator.
    """
    X = np.asarray(samples, dtype=np.float64)
    n, d = X.shape
    order = rng.permutation(n)
    xx = sqnorms(X)
    chosen: list[int] = []
    units = np.empty((0, d))
    skipped: list[int] = []
    for i in order:
        if xx[i] == 0.0:
            continue
        u = X[i] / np.sqrt(xx[i])
        if units.shape[0] and np.max(np.abs(units @ u)) > 1.0 - 1e-12:
            skipped.append(int(i))
            continue
        chosen.append(int(i))
        units = np.vstack([units, u])
        if len(chosen) == k:
            break
    chosen += skipped[: k - len(chosen)]
    atoms = X[chosen].copy()
    if len(chosen) < k:
        atoms = np.vstack([atoms, rng.standard_normal((k - len(chosen), d))])
    return atoms


def _mean_loss(X: np.ndarray, d: Dictionary) -> float:
    return float(residual_energies(X, d).mean()) if X.shape[0] else 0.0


ROUNDOFF_FLOOR = 1e-14


def _rel_change(old: float, new: float, energy: float) -> float:
    """|old - new| / old, with old floored at roundoff level of the data energy."""
    scale = max(old, ROUNDOFF_FLOOR * energy)
    if scale == 0.0:
        return 0.0
    return abs(old - new) / scale


def _reinit_empty(X: np.ndarray, atoms: np.ndarray, empty: list[int], events: Counter) -> None:
    errs = shallow_errors(X, Dictionary(atoms))
    order = np.argsort(-errs, kind="stable")
    for k, i in zip(empty, order):
        if errs[i] <= 0.0:
            break
        atoms[k] = X[i]
        events["empty_cluster_reinit"] += 1


def fit_batch(X: np.ndarray, atoms: np.ndarray, config: TrainConfig) -> tuple[Dictionary, list[float], bool, Counter]:
    """Alternating assignment / PCA updates from the given starting atoms."""
    atoms = np.array(atoms, dtype=np.float64)
    events: Counter = Counter()
    d = Dictionary(atoms)
    energy = float(sqnorms(X).mean()) if X.shape[0] else 0.0
    loss = _mean_loss(X, d)
    losses = [loss]
    converged = loss == 0.0
    epoch = 0
    while not converged and epoch < config.max_epochs:
        epoch += 1
        idx, _, _, zero = select_batch(X, d)
        empty = []
        for k in range(atoms.shape[0]):
            members = np.flatnonzero((idx == k) & ~zero)
            if members.size == 0:
                empty.append(k)
                continue
            try:
                v, ok = leading_eigenvector(X[members], atoms[k])
            except EmptyClusterError:
                empty.append(k)
                continue
            if not ok:
                events["power_iteration_fallback"] += 1
            atoms[k] = v
        if empty:
            _reinit_empty(X, atoms, empty, events)
        d = Dictionary(atoms)
        new = _mean_loss(X, d)
        losses.append(new)
        converged = new == 0.0 or _rel_change(loss, new, energy) < config.tol_rel_loss
        loss = new
        log.debug("epoch %d  mean loss %.6g", epoch, new)
    return d, losses, converged, events


def fit_online(X: np.ndarray, atoms: np.ndarray, config: TrainConfig, rng: np.random.Generator,
               on_step=None) -> tuple[Dictionary, list[float], bool, Counter]:
    """Per-sample updates of the winning atom, renormalized to unit norm after each step.

    ``on_step(n, k)`` is called with the sample index and winning atom
    before every update.
    """
    atoms = np.array(atoms, dtype=np.float64)
    atoms /= np.sqrt(sqnorms(atoms))[:, None]
    sq = sqnorms(atoms)
    events: Counter = Counter()
    xx = sqnorms(X)
    energy = float(xx.mean()) if X.shape[0] else 0.0
    loss = _mean_loss(X, Dictionary(atoms))
    losses = [loss]
    converged = loss == 0.0
    epoch = 0
    while not converged and epoch < config.max_epochs:
        epoch += 1
        for n in rng.permutation(X.shape[0]):
            if xx[n] == 0.0:
                continue
            x = X[n]
            ip = inner(x, atoms)
            k = int(np.argmax(ip * (ip / sq)))
            if on_step is not None:
                on_step(int(n), k)
            phi = atoms[k]
            try:
                if config.rule == "online_lambda1":
                    new = _lambda1(x[None, :], phi)
                elif config.rule == "online_lambda2":
                    new, _ = _lambda2(x[None, :], phi)
                else:
                    new = _oja(x, phi, config.learning_rate)
            except NearOrthogonalMemberError:
                events["near_orthogonal_member"] += 1
                continue
            except DegenerateClusterError:
                events["degenerate_cluster"] += 1
                continue
            norm = float(np.sqrt(sqnorms(new)))
            if not norm >= DEGENERATE_NORM or not np.isfinite(norm):
                events["degenerate_update"] += 1
                continue
            atoms[k] = new / norm
            sq[k] = sqnorms(atoms[k])
        new_loss = _mean_loss(X, Dictionary(atoms))
        losses.append(new_loss)
        converged = new_loss == 0.0 or _rel_change(loss, new_loss, energy) < config.tol_rel_loss
        loss = new_loss
        log.debug("epoch %d  mean loss %.6g", epoch, new_loss)
    for name, count in events.items():
        log.info("online training: %d x %s", count, name)
    return Dictionary(atoms), losses, converged, events


def train_layer(R: np.ndarray, k: int, config: TrainConfig, seed: int,
                active: np.ndarray | None = None) -> tuple[Dictionary, list[float], bool, Counter]:
    """Initialize from R and fit one layer on its active rows."""
    rng = np.random.default_rng(seed)
    atoms = init_atoms(R, k, rng)
    X = R if active is None else R[active]
    if config.rule == "batch_pca":
        return fit_batch(X, atoms, config)
    return fit_online(X, atoms, config, rng)


def _captured(X: np.ndarray, d: Dictionary) -> float:
    total = float(sqnorms(X).sum())
    if total == 0.0:
        return 0.0
    _, _, cos_sq, _ = select_batch(X, d)
    return float((cos_sq * sqnorms(X)).sum()) / total


def _train_shallow(samples, config: TrainConfig, rule: str | None) -> tuple[Dictionary, TrainReport]:
    X = stack_samples(samples)
    k = config.effective_k(X.shape[1])
    if X.shape[0] < k:
        raise ValueError(f"need at least K={k} samples, got {X.shape[0]}")
    if rule is not None and config.rule != rule:
        raise ValueError(f"config.rule is {config.rule!r}, expected {rule!r}")
    d, losses, converged, events = train_layer(X, k, config, config.seed)
    report = TrainReport([losses], [_captured(X, d)], [converged], [], events)
    return d, report


def train_shallow_batch(samples, config: TrainConfig) -> tuple[Dictionary, TrainReport]:
    return _train_shallow(samples, config, "batch_pca")


def train_shallow_online(samples, config: TrainConfig) -> tuple[Dictionary, TrainReport]:
    if config.rule == "batch_pca":
        raise ValueError("online training needs an online_* rule")
    return _train_shallow(samples, config, None)
