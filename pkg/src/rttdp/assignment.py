"""Confusion tracking and derangement label maps for the balanced low-entropy attack."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionState:
    """Moving-average confusion ``C`` (rows: true class, cols: predicted) and its label map."""

    C: np.ndarray
    beta: float = 0.9
    mapping: Optional[np.ndarray] = None
    solver: str = "greedy"

    @classmethod
    def uniform(cls, num_classes: int, beta: float = 0.9, solver: str = "greedy") -> "ConfusionState":
        if num_classes < 2:
            raise ContractError("a derangement needs at least two classes")
        if solver not in ("greedy", "exact"):
            raise ContractError(f"unknown solver {solver!r}")
        state = cls(np.full((num_classes, num_classes), 1.0 / num_classes), beta=beta, solver=solver)
        state.refresh()
        return state

    @property
    def num_classes(self) -> int:
        return self.C.shape[0]

    def refresh(self) -> np.ndarray:
        self.mapping = solve_mapping(self.C, self.solver)
        return self.mapping


def blended_confusion(C: np.ndarray, posteriors: np.ndarray, labels, beta: float) -> np.ndarray:
    """Return ``C`` with rows of the observed classes moved toward their mean posterior."""
    labels = np.asarray(labels, dtype=np.int64)
    posteriors = np.asarray(posteriors, dtype=float)
    out = np.array(C, dtype=float, copy=True)
    present = np.unique(labels)
    sums = np.zeros_like(out)
    np.add.at(sums, labels, posteriors)
    counts = np.bincount(labels, minlength=out.shape[0]).astype(float)
    class_mean = sums[present] / counts[present, None]
    out[present] = beta * out[present] + (1.0 - beta) * class_mean
    return out


def update_confusion(state: ConfusionState, posteriors, labels) -> None:
    """In-place EMA update of the rows whose class appears in ``labels``."""
    state.C = blended_confusion(state.C, posteriors, labels, state.beta)


def _check_square(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ContractError(f"confusion must be square, got {C.shape}")
    if C.shape[0] < 2:
        raise ContractError("no derangement exists for a single class")
    return C


def greedy_mapping(C) -> np.ndarray:
    """Greedy constrained assignment on the row-normalized, diagonal-free confusion.

    Each round L1-normalizes the remaining rows, commits the row whose best
    entry is largest (lowest index on ties) to that column, then removes
    the row and column. If only a diagonal cell remains for the last row,
    it is swapped into the committed pair that loses the least mass.
    """
    C = _check_square(C)
    k = C.shape[0]
    work = np.where(np.eye(k, dtype=bool), 0.0, np.maximum(C, 0.0))
    mapping = np.full(k, -1, dtype=np.int64)
    free_rows = np.ones(k, bool)
    free_cols = np.ones(k, bool)
    for _ in range(k):
        masked = np.where(free_rows[:, None] & free_cols[None, :] & ~np.eye(k, dtype=bool), work, 0.0)
        norms = np.maximum(masked.sum(axis=1, keepdims=True), 1e-12)
        normalized = masked / norms
        best_val = normalized.max(axis=1)
        best_col = normalized.argmax(axis=1)
        best_val[~free_rows] = -1.0
        row = int(np.argmax(best_val))
        if best_val[row] <= 0.0:
            break
        col = int(best_col[row])
        mapping[row] = col
        free_rows[row] = False
        free_cols[col] = False
    if (mapping < 0).any():
        mapping = _repair(mapping, work)
    return mapping


def _repair(mapping: np.ndarray, C: np.ndarray) -> np.ndarray:
    mapping = mapping.copy()
    for row in np.flatnonzero(mapping < 0):
        used = set(mapping[mapping >= 0].tolist())
        col = next(c for c in range(len(mapping)) if c not in used)
        if col != row:
            mapping[row] = col
            continue
        # swap with committed row j: j -> row, row -> mapping[j]
        best, best_gain = None, -np.inf
        for j in np.flatnonzero(mapping >= 0):
            m = mapping[j]
            gain = C[row, m] + C[j, row] - C[j, m]
            if gain > best_gain:
                best, best_gain = j, gain
        mapping[row] = mapping[best]
        mapping[best] = row
    return mapping


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment for a square matrix.

    Shortest augmenting paths with row/column potentials, O(n^3).
    Returns ``assign`` with ``assign[row] = col``.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[match[j] - 1] = j - 1
    return assign


def exact_mapping(C) -> np.ndarray:
    """Derangement maximizing ``sum_k C[k, map[k]]``, solved exactly."""
    C = _check_square(C)
    k = C.shape[0]
    # a finite penalty larger than any achievable gain keeps the diagonal out
    penalty = (np.abs(C).max() + 1.0) * (k + 1)
    cost = np.where(np.eye(k, dtype=bool), penalty, -C)
    return hungarian(cost)


def solve_mapping(C, solver: str = "greedy") -> np.ndarray:
    if solver == "greedy":
        return greedy_mapping(C)
    if solver == "exact":
        return exact_mapping(C)
    raise ContractError(f"unknown solver {solver!r}")


def mapping_objective(C, mapping) -> float:
    C = np.asarray(C, dtype=float)
    return float(C[np.arange(len(mapping)), mapping].sum())


def is_derangement(mapping) -> bool:
    mapping = np.asarray(mapping)
    k = len(mapping)
    return bool(sorted(mapping.tolist()) == list(range(k)) and np.all(mapping != np.arange(k)))

