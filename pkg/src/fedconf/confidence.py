"""Entropy of penultimate activations and per-sample teacher selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedconf.errors import ConfigError, DomainError, ShapeError
from fedconf.tensor import Matrix


@dataclass(frozen=True)
class EntropyMode:
    """``normalize`` rescales each row to sum to one before taking -sum p ln p.

    Without it the literal -sum x ln x is taken over the positive entries. Rows
    whose sum is below ``epsilon`` get +inf (a dead model is never confident).
    """

    normalize: bool = True
    epsilon: float = 1e-12

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("entropy epsilon must be > 0")

    @property
    def name(self) -> str:
        return "normalized" if self.normalize else "raw"


def entropy_rows(x: Matrix, mode: EntropyMode = EntropyMode()) -> np.ndarray:
    """Entropy of every row of ``x`` (natural log, 0 ln 0 = 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if np.any(x < 0):
        raise DomainError("entropy needs non-negative activations (is the penultimate layer relu?)")
    totals = x.sum(axis=1)
    degenerate = totals < mode.epsilon
    p = x / np.where(degenerate, 1.0, totals)[:, None] if mode.normalize else x
    positive = p > 0
    logs = np.log(np.where(positive, p, 1.0))
    h = -np.sum(np.where(positive, p * logs, 0.0), axis=1)
    h[degenerate] = np.inf
    return h


def entropy(x, mode: EntropyMode = EntropyMode()) -> float:
    return float(entropy_rows(np.asarray(x, dtype=np.float64).reshape(1, -1), mode)[0])


@dataclass
class TeacherSelection:
    chosen: np.ndarray      # (samples,) client index per sample
    entropies: np.ndarray   # (samples, clients)
    histogram: np.ndarray   # (clients,) selection counts


def select_from_entropies(entropies: np.ndarray) -> TeacherSelection:
    """Lowest entropy wins; ties and all-inf rows go to the lowest client index."""
    entropies = np.asarray(entropies, dtype=np.float64)
    chosen = np.argmin(entropies, axis=1)
    # argmin on an all-inf row already returns 0; NaN never occurs for finite inputs
    hist = np.bincount(chosen, minlength=entropies.shape[1])
    return TeacherSelection(chosen, entropies, hist)


def select_teachers(penultimates: list[Matrix], mode: EntropyMode = EntropyMode()) -> TeacherSelection:
    if not penultimates:
        raise ShapeError("need at least one client penultimate matrix")
    shape = penultimates[0].shape
    for k, p in enumerate(penultimates):
        if p.shape != shape:
            raise ShapeError(f"client {k} penultimate shape {p.shape} != client 0 shape {shape}")
    ent = np.stack([entropy_rows(p, mode) for p in penultimates], axis=1)
    return select_from_entropies(ent)


def assemble_targets(penultimates: list[Matrix], selection: TeacherSelection) -> Matrix:
    """Row j of the result is row j of the chosen client's penultimate matrix."""
    chosen = selection.chosen
    if chosen.size and (chosen.min() < 0 or chosen.max() >= len(penultimates)):
        raise IndexError("teacher index out of range")
    stacked = np.stack(penultimates)
    if stacked.shape[1] != chosen.size:
        raise ShapeError(f"selection covers {chosen.size} samples, batch has {stacked.shape[1]}")
    return stacked[chosen, np.arange(chosen.size)]
