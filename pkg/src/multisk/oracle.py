"""Brute-force exact solver for small binary many-to-many assignment problems."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .matrix_io import DenseMatrix

MAX_CANDIDATES = 10**8


class InfeasibleDivisibilityError(ValueError):
    """Raised when N * K' is not a multiple of K."""


class InstanceTooLargeError(ValueError):
    """Raised when the unpruned search space exceeds MAX_CANDIDATES."""


@dataclass(frozen=True)
class OracleResult:
    q_binary: DenseMatrix
    objective: float
    candidates_enumerated: int


def solve_exact(
    S: DenseMatrix | np.ndarray,
    k_prime: int,
    max_candidates: int = MAX_CANDIDATES,
) -> OracleResult:
    """
    Find the binary matrix maximising <Q, S> with row sums K' and column sums N*K'/K.

    Rows are filled depth-first with K'-subsets in lexicographic order; a branch is cut
    as soon as a column is over-full or can no longer be filled by the remaining rows.
    Among equally good matrices the lexicographically first one wins.

    Args:
        S: N x K similarity matrix.
        k_prime: Anchors per sample.
        max_candidates: Upper bound on C(K, K')^N accepted before searching.

    Returns:
        The optimal binary assignment, its objective and the number of feasible
        matrices enumerated.

    Raises:
        InfeasibleDivisibilityError: If N * K' is not divisible by K.
        InstanceTooLargeError: If C(K, K')^N exceeds max_candidates.
    """
    s = S.data if isinstance(S, DenseMatrix) else np.asarray(S, dtype=np.float64)
    n_rows, n_anchors = s.shape
    if not 1 <= k_prime <= n_anchors:
        raise ValueError(f"k_prime must be between 1 and K={n_anchors}, got {k_prime}")
    if (n_rows * k_prime) % n_anchors:
        raise InfeasibleDivisibilityError(
            f"N*K'/K = {n_rows}*{k_prime}/{n_anchors} is not an integer; "
            "no binary assignment can balance the anchors"
        )
    n_subsets = math.comb(n_anchors, k_prime)
    if n_subsets**n_rows > max_candidates:
        raise InstanceTooLargeError(
            f"Search space C({n_anchors},{k_prime})^{n_rows} = {n_subsets}^{n_rows} "
            f"exceeds {max_candidates}"
        )

    col_target = n_rows * k_prime // n_anchors
    subsets = list(itertools.combinations(range(n_anchors), k_prime))
    subset_scores = [
        [float(sum(s[i, j] for j in subset)) for subset in subsets] for i in range(n_rows)
    ]
    counts = [0] * n_anchors
    chosen = [0] * n_rows
    best_objective = -math.inf
    best_rows: list[int] | None = None
    enumerated = 0

    def visit(row: int, running: float) -> None:
        nonlocal best_objective, best_rows, enumerated
        if row == n_rows:
            enumerated += 1
            if running > best_objective:
                best_objective = running
                best_rows = chosen.copy()
            return
        remaining = n_rows - row - 1
        for index, subset in enumerate(subsets):
            if any(counts[j] >= col_target for j in subset):
                continue
            for j in subset:
                counts[j] += 1
            if all(col_target - count <= remaining for count in counts):
                chosen[row] = index
                visit(row + 1, running + subset_scores[row][index])
            for j in subset:
                counts[j] -= 1

    visit(0, 0.0)

    q = np.zeros((n_rows, n_anchors))
    for i, index in enumerate(best_rows):
        q[i, list(subsets[index])] = 1.0
    return OracleResult(
        q_binary=DenseMatrix(q),
        objective=float(np.sum(q * s)),
        candidates_enumerated=enumerated,
    )


def is_feasible(q: DenseMatrix | np.ndarray, k_prime: int) -> bool:
    """Exact integer check that a binary matrix satisfies the row and column counts."""
    q = q.data if isinstance(q, DenseMatrix) else np.asarray(q)
    if not np.all((q == 0) | (q == 1)):
        return False
    counts = q.astype(np.int64)
    n_rows, n_anchors = counts.shape
    if (n_rows * k_prime) % n_anchors:
        return False
    return bool(
        np.all(counts.sum(axis=1) == k_prime)
        and np.all(counts.sum(axis=0) == n_rows * k_prime // n_anchors)
    )
