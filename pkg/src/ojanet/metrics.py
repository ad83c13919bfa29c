"""Reconstruction and energy metrics, plus their CSV / JSON serializations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core import DeepModel, stack_samples
from .data import format_number
from .deep import decompose_batch
from .shallow import TrainReport


@dataclass
class ErrorSummary:
    mean: float
    median: float
    max: float
    relative: float  # sum ||x - T||^2 / sum ||x||^2

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruction_error(samples, model: DeepModel, depth: int | None = None) -> ErrorSummary:
    """Summary of ||x - T||^2 over the samples; ``depth=0`` means an empty template."""
    X = stack_samples(samples)
    b = decompose_batch(X, model, depth)
    err = ((X - b.template(X)) ** 2).sum(axis=1)
    total = float(b.energies[:, 0].sum())
    if err.size == 0:
        return ErrorSummary(0.0, 0.0, 0.0, 0.0)
    return ErrorSummary(float(err.mean()), float(np.median(err)), float(err.max()),
                        float(err.sum()) / total if total else 0.0)


def energy_per_level(samples, model: DeepModel) -> np.ndarray:
    """Share of the total input energy captured by each layer's projections."""
    X = stack_samples(samples)
    b = decompose_batch(X, model)
    total = float(b.energies[:, 0].sum())
    if total == 0.0:
        return np.zeros(model.depth)
    shares = np.zeros(model.depth)
    for l, layer in enumerate(model.layers):
        P = b.coefficients[:, l, None] * layer.atoms[b.indices[:, l]]
        shares[l] = float((P * P).sum()) / total
    return shares


def residual_share(samples, model: DeepModel) -> float:
    X = stack_samples(samples)
    b = decompose_batch(X, model)
    total = float(b.energies[:, 0].sum())
    return float(b.energies[:, -1].sum()) / total if total else 0.0


def cluster_purity(assignments, true_labels) -> float:
    """Fraction of samples carrying the majority true label of their cluster."""
    a = np.asarray(assignments)
    t = np.asarray(true_labels)
    if a.shape != t.shape:
        raise ValueError("assignments and labels must have the same length")
    if a.size == 0:
        return 1.0
    _, t_codes = np.unique(t, return_inverse=True)
    _, a_codes = np.unique(a, return_inverse=True)
    table = np.zeros((a_codes.max() + 1, t_codes.max() + 1), dtype=np.int64)
    np.add.at(table, (a_codes, t_codes), 1)
    return float(table.max(axis=1).sum()) / a.size


def write_epoch_csv(path, report: TrainReport) -> None:
    with open(path, "w", newline="") as f:
        f.write("layer,epoch,mean_loss\n")
        for layer, history in enumerate(report.losses, start=1):
            for epoch, loss in enumerate(history):
                f.write(f"{layer},{epoch},{format_number(loss)}\n")


def write_energy_csv(path, shares: np.ndarray, residuals: np.ndarray) -> None:
    """One row per level: captured share, cumulative share and the residual share left after it."""
    with open(path, "w", newline="") as f:
        f.write("level,captured,cumulative,residual\n")
        cum = 0.0
        for l, (s, r) in enumerate(zip(shares, residuals), start=1):
            cum += float(s)
            f.write(f"{l},{format_number(s)},{format_number(cum)},{format_number(r)}\n")


def residual_shares_by_level(samples, model: DeepModel) -> np.ndarray:
    X = stack_samples(samples)
    b = decompose_batch(X, model)
    total = float(b.energies[:, 0].sum())
    if total == 0.0:
        return np.zeros(model.depth)
    return b.energies[:, 1:].sum(axis=0) / total


def summary_json(**fields) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not serializable: {type(o).__name__}")

    return json.dumps(fields, sort_keys=True, default=default)
