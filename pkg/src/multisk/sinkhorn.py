"""Sinkhorn-Knopp solvers: vanilla, modified-constraint baseline, and Multi-Assignment.

All solvers maximise ``<Q, S> + epsilon * H(Q)`` under their marginal constraints by
multiplicative scaling of the Gibbs kernel ``exp(S / epsilon)``. When a scaling factor
under- or overflows, the solve restarts with log-sum-exp updates.

Multi-SK steps may be over-relaxed: a factor moves by ``(target / sum) ** omega``
instead of ``target / sum``. A group keeps omega only while the step still gains at
least ``RELAXATION_SAFEGUARD`` of the exact step's gain in the dual objective, which
keeps the dual ascent monotone.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .matrix_io import DenseMatrix, DenseTensor3

logger = logging.getLogger(__name__)

MARGINAL_SUM_TOLERANCE = 1e-9
CLAMP_DUST = 1e-12
RELAXATION_SAFEGUARD = 0.1


class MarginalMismatchError(ValueError):
    """Raised when row and column marginals cannot describe the same total mass."""


class _ScalingBreakdown(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters shared by every solver. ``relaxation`` only affects Multi-SK."""

    epsilon: float = 0.05
    max_iters: int = 1000
    tol: float = 1e-6
    mu: float = 0.25
    k_prime: int = 32
    relaxation: float = 1.9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.mu < 1:
            raise ValueError(f"mu must be in (0, 1), got {self.mu}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.k_prime < 1:
            raise ValueError(f"k_prime must be >= 1, got {self.k_prime}")
        if not 1 <= self.relaxation < 2:
            raise ValueError(f"relaxation must be in [1, 2), got {self.relaxation}")

    def replace(self, **changes) -> SolverConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SolveReport:
    iterations_used: int
    final_violation: float
    converged: bool
    log_domain: bool = False
    history: tuple[float, ...] = field(default=(), repr=False)


def _as_array(m: DenseMatrix | np.ndarray) -> np.ndarray:
    if isinstance(m, (DenseMatrix, DenseTensor3)):
        return m.data
    return np.asarray(m, dtype=np.float64)


def _check_factor(values: np.ndarray) -> None:
    if not (np.all(np.isfinite(values)) and np.all(values > 0)):
        raise _ScalingBreakdown


def _report(iterations: int, violation: float, tol: float, log_domain: bool, history: list):
    converged = bool(violation <= tol)
    if not converged:
        logger.debug(
            "Scaling stopped after %d sweeps with violation %.3e (tol %.1e)",
            iterations,
            violation,
            tol,
        )
    return SolveReport(iterations, float(violation), converged, log_domain, tuple(history))


def _check_k_prime(n_anchors: int, k_prime: int) -> None:
    if not 1 <= k_prime <= n_anchors:
        raise ValueError(f"k_prime must be between 1 and K={n_anchors}, got {k_prime}")


def marginal_violation(q: np.ndarray, row_marginals: np.ndarray, col_marginals: np.ndarray):
    """Max absolute residual of the row and column sums of a 2D plan."""
    return max(
        float(np.max(np.abs(q.sum(axis=1) - row_marginals))),
        float(np.max(np.abs(q.sum(axis=0) - col_marginals))),
    )


def constraint_violation(qp: DenseTensor3 | np.ndarray) -> float:
    """
    Max absolute residual over the three Multi-SK constraint families.

    Rows of each channel must sum to 1, columns of each channel to N/K,
    and every (sample, anchor) depth fibre to 1.
    """
    qp = _as_array(qp)
    n_channels, n_rows, _ = qp.shape
    return max(
        float(np.max(np.abs(qp.sum(axis=2) - 1.0))),
        float(np.max(np.abs(qp.sum(axis=1) - n_rows / n_channels))),
        float(np.max(np.abs(qp.sum(axis=0) - 1.0))),
    )


def assignment_objective(q: DenseMatrix | np.ndarray, s: DenseMatrix | np.ndarray) -> float:
    """Frobenius inner product <Q, S>."""
    return float(np.sum(_as_array(q) * _as_array(s)))


def _scale_2d_kernel(s, r, c, cfg: SolverConfig):
    logits = s / cfg.epsilon
    kernel = np.exp(logits - logits.max())
    u = np.ones(s.shape[0])
    v = np.ones(s.shape[1])
    history = []
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for iteration in range(1, cfg.max_iters + 1):
            u = r / (kernel @ v)
            _check_factor(u)
            v = c / (kernel.T @ u)
            _check_factor(v)
            q = u[:, None] * kernel * v[None, :]
            violation = marginal_violation(q, r, c)
            history.append(violation)
            if violation <= cfg.tol:
                break
    return q, _report(iteration, violation, cfg.tol, False, history)


def _scale_2d_log(s, r, c, cfg: SolverConfig):
    logits = s / cfg.epsilon
    log_r = np.log(r)
    log_c = np.log(c)
    f = np.zeros(s.shape[0])
    g = np.zeros(s.shape[1])
    history = []
    for iteration in range(1, cfg.max_iters + 1):
        f = log_r - logsumexp(logits + g[None, :], axis=1)
        g = log_c - logsumexp(logits + f[:, None], axis=0)
        q = np.exp(logits + f[:, None] + g[None, :])
        violation = marginal_violation(q, r, c)
        history.append(violation)
        if violation <= cfg.tol:
            break
    return q, _report(iteration, violation, cfg.tol, True, history)


def _scale_2d(s, r, c, cfg: SolverConfig):
    try:
        return _scale_2d_kernel(s, r, c, cfg)
    except _ScalingBreakdown:
        logger.debug("Scaling factor under/overflow; restarting in log domain")
        return _scale_2d_log(s, r, c, cfg)


def vanilla_sinkhorn(
    S: DenseMatrix | np.ndarray,
    row_marginals,
    col_marginals,
    cfg: SolverConfig,
) -> tuple[DenseMatrix, SolveReport]:
    """
    Classic Sinkhorn-Knopp: alternate row and column scaling of exp(S / epsilon).

    Args:
        S: N x K similarity matrix.
        row_marginals: Positive target row sums (length N).
        col_marginals: Positive target column sums (length K).
        cfg: Solver configuration (mu and k_prime are ignored).

    Returns:
        Tuple of (Q, report). Q is returned even when the report says not converged.

    Raises:
        MarginalMismatchError: If marginals are non-positive or their totals differ.
    """
    s = _as_array(S)
    r = np.asarray(row_marginals, dtype=np.float64).reshape(-1)
    c = np.asarray(col_marginals, dtype=np.float64).reshape(-1)
    if r.shape != (s.shape[0],) or c.shape != (s.shape[1],):
        raise MarginalMismatchError(
            f"Marginal lengths ({r.size}, {c.size}) do not match matrix shape {s.shape}"
        )
    if np.any(r <= 0) or np.any(c <= 0):
        raise MarginalMismatchError("Marginals must be strictly positive")
    if abs(r.sum() - c.sum()) > MARGINAL_SUM_TOLERANCE * max(1.0, abs(r.sum())):
        raise MarginalMismatchError(
            f"Row marginals sum to {r.sum()!r} but column marginals sum to {c.sum()!r}"
        )
    q, report = _scale_2d(s, r, c, cfg)
    return DenseMatrix(q), report


def modified_sinkhorn(S: DenseMatrix | np.ndarray, cfg: SolverConfig):
    """
    Many-to-many baseline that only changes the 2D marginals.

    Rows are scaled to sum to K' and columns to N*K'/K. Nothing bounds individual
    cells, so entries may exceed 1.
    """
    s = _as_array(S)
    n_rows, n_anchors = s.shape
    _check_k_prime(n_anchors, cfg.k_prime)
    rows = np.full(n_rows, float(cfg.k_prime))
    cols = np.full(n_anchors, n_rows * cfg.k_prime / n_anchors)
    q, report = _scale_2d(s, rows, cols, cfg)
    return DenseMatrix(q), report


def build_similarity_tensor(S: DenseMatrix | np.ndarray, cfg: SolverConfig) -> DenseTensor3:
    """Stack K channels of S: the first k_prime unchanged, the rest damped by mu."""
    s = _as_array(S)
    n_anchors = s.shape[1]
    _check_k_prime(n_anchors, cfg.k_prime)
    weights = np.full(n_anchors, cfg.mu)
    weights[: cfg.k_prime] = 1.0
    return DenseTensor3(weights[:, None, None] * s[None, :, :])


def extract_assignment(qp: DenseTensor3 | np.ndarray, k_prime: int) -> DenseMatrix:
    """Depth-wise sum of the first k_prime channels of Q'."""
    qp = _as_array(qp)
    _check_k_prime(qp.shape[0], k_prime)
    q = qp[:k_prime].sum(axis=0)
    q[(q < 0) & (q > -CLAMP_DUST)] = 0.0
    q[(q > 1) & (q < 1 + CLAMP_DUST)] = 1.0
    return DenseMatrix(q)


def _relaxed_step(log_ratio: np.ndarray, omega: float) -> np.ndarray:
    """
    Log-space step per group: ``omega * log_ratio`` where that still pays, else ``log_ratio``.

    For a group with log(target / sum) = L, a step of w * L changes the dual objective
    by target * (w * L - exp(-L) * expm1(w * L)); w = 1 is the exact maximiser.
    """
    if omega == 1.0:
        return log_ratio
    with np.errstate(over="ignore", invalid="ignore"):
        exact_gain = log_ratio + np.expm1(-log_ratio)
        relaxed_gain = omega * log_ratio - np.exp(-log_ratio) * np.expm1(omega * log_ratio)
        keep = relaxed_gain >= RELAXATION_SAFEGUARD * exact_gain
    return np.where(keep, omega, 1.0) * log_ratio


def _rescale(factor: np.ndarray, sums: np.ndarray, log_target: float, omega: float):
    _check_factor(sums)
    factor = factor * np.exp(_relaxed_step(log_target - np.log(sums), omega))
    _check_factor(factor)
    return factor


def _multi_kernel(sp: np.ndarray, cfg: SolverConfig):
    n_channels, n_rows, _ = sp.shape
    log_col_total = np.log(n_rows / n_channels)
    logits = sp / cfg.epsilon
    kernel = np.exp(logits - logits.max())
    # Q'[k, i, j] = a[k, i] * b[k, j] * c[i, j] * kernel[k, i, j]
    a = np.ones((n_channels, n_rows))
    b = np.ones((n_channels, n_channels))
    c = np.ones((n_rows, n_channels))
    history = []
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for iteration in range(1, cfg.max_iters + 1):
            # The first sweep is exact so that constant shifts of S cancel before relaxing.
            omega = 1.0 if iteration == 1 else cfg.relaxation
            kc = kernel * c[None, :, :]
            a = _rescale(a, a * np.einsum("kij,kj->ki", kc, b), 0.0, omega)
            b = _rescale(b, b * np.einsum("kij,ki->kj", kc, a), log_col_total, omega)
            kab = kernel * a[:, :, None] * b[:, None, :]
            c = _rescale(c, c * kab.sum(axis=0), 0.0, omega)
            qp = kab * c[None, :, :]
            violation = constraint_violation(qp)
            history.append(violation)
            if violation <= cfg.tol:
                break
    return qp, _report(iteration, violation, cfg.tol, False, history)


def _multi_log(sp: np.ndarray, cfg: SolverConfig):
    n_channels, n_rows, _ = sp.shape
    log_col_total = np.log(n_rows / n_channels)
    logits = sp / cfg.epsilon
    f = np.zeros((n_channels, n_rows))
    g = np.zeros((n_channels, n_channels))
    h = np.zeros((n_rows, n_channels))
    history = []
    for iteration in range(1, cfg.max_iters + 1):
        omega = 1.0 if iteration == 1 else cfg.relaxation
        log_q = logits + f[:, :, None] + g[:, None, :] + h[None, :, :]
        f = f + _relaxed_step(-logsumexp(log_q, axis=2), omega)
        log_q = logits + f[:, :, None] + g[:, None, :] + h[None, :, :]
        g = g + _relaxed_step(log_col_total - logsumexp(log_q, axis=1), omega)
        log_fg = logits + f[:, :, None] + g[:, None, :]
        h = h + _relaxed_step(-logsumexp(log_fg + h[None, :, :], axis=0), omega)
        qp = np.exp(log_fg + h[None, :, :])
        violation = constraint_violation(qp)
        history.append(violation)
        if violation <= cfg.tol:
            break
    return qp, _report(iteration, violation, cfg.tol, True, history)


def multi_sinkhorn(
    S: DenseMatrix | np.ndarray,
    cfg: SolverConfig,
) -> tuple[DenseTensor3, DenseMatrix, SolveReport]:
    """
    Multi-Assignment Sinkhorn-Knopp.

    Builds the K x N x K similarity tensor S', then scales rows (per channel), columns
    (per channel) and depth fibres until every channel row sums to 1, every channel
    column sums to N/K and every (sample, anchor) fibre sums to 1. One iteration is one
    sweep in that order.

    Args:
        S: N x K sample-to-anchor similarity matrix.
        cfg: Solver configuration.

    Returns:
        Tuple of (Q', Q, report) where Q is the depth-wise sum of the first k_prime
        channels of Q': entries in [0, 1], rows summing to K', columns to N*K'/K.
    """
    s = _as_array(S)
    n_rows, n_anchors = s.shape
    if n_rows < 1:
        raise ValueError("Similarity matrix must have at least one row")
    _check_k_prime(n_anchors, cfg.k_prime)

    if cfg.k_prime == n_anchors:
        qp = np.full((n_anchors, n_rows, n_anchors), 1.0 / n_anchors)
        return DenseTensor3(qp), DenseMatrix(np.ones_like(s)), SolveReport(0, 0.0, True)

    sp = build_similarity_tensor(s, cfg).data
    try:
        qp, report = _multi_kernel(sp, cfg)
    except _ScalingBreakdown:
        logger.debug("Scaling factor under/overflow; restarting Multi-SK in log domain")
        qp, report = _multi_log(sp, cfg)
    return DenseTensor3(qp), extract_assignment(qp, cfg.k_prime), report
