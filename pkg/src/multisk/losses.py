"""Structure-preserving consistency (SSPC) and contrastive losses with analytic gradients.

Assignment targets produced by the solvers are constants: gradients flow through the
similarity logits only.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .matrix_io import DenseMatrix
from .sinkhorn import SolverConfig, modified_sinkhorn, multi_sinkhorn

MODALITIES = ("t", "v", "a")
SPACES = ("input", "joint")
TARGET_SOLVERS = ("multi", "modified")
NCE_PAIRS = (("t", "v"), ("t", "a"), ("v", "a"))


def _text_video_weights() -> tuple[tuple[float, ...], ...]:
    text_video = {("t", "v"), ("v", "t")}
    return tuple(
        tuple(1.0 if (m, n) in text_video else 0.1 for n in MODALITIES) for m in MODALITIES
    )


DEFAULT_PAIR_WEIGHTS = _text_video_weights()

# exp(1 / tau) stays finite in float64.
MIN_TAU = 2e-3


class ZeroNormError(ValueError):
    """Raised when a cosine similarity would involve a zero vector."""


def _check_tau(tau: float) -> None:
    if not tau >= MIN_TAU:
        raise ValueError(f"tau must be >= {MIN_TAU} so exp-similarities stay finite, got {tau}")


def _check_tags(modality: str, space: str) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"Unknown modality {modality!r}; expected one of {MODALITIES}")
    if space not in SPACES:
        raise ValueError(f"Unknown space {space!r}; expected one of {SPACES}")


def _row_norms(vectors: np.ndarray, label: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError(f"{label} contains a zero-norm vector")
    return norms


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """K learnable anchor vectors for one modality in one space."""

    vectors: np.ndarray
    modality: str
    space: str

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"Anchor vectors must be K x d, got shape {vectors.shape}")
        _check_tags(self.modality, self.space)
        _row_norms(vectors, f"AnchorSet({self.modality}, {self.space})")
        object.__setattr__(self, "vectors", vectors)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """N embeddings of one modality in one space."""

    vectors: np.ndarray
    modality: str
    space: str

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"Embeddings must be N x d, got shape {vectors.shape}")
        _check_tags(self.modality, self.space)
        _row_norms(vectors, f"EmbeddingBatch({self.modality}, {self.space})")
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ModalityBatches:
    """Input-space and joint-space batches keyed by modality."""

    input: Mapping[str, EmbeddingBatch]
    joint: Mapping[str, EmbeddingBatch]

    def __post_init__(self):
        sizes = {len(b) for b in (*self.input.values(), *self.joint.values())}
        if len(sizes) > 1:
            raise ValueError(f"All batches must have the same size, got {sorted(sizes)}")


@dataclass(frozen=True)
class ModalityAnchors:
    """Input-space and joint-space anchor sets keyed by modality."""

    input: Mapping[str, AnchorSet]
    joint: Mapping[str, AnchorSet]

    def __post_init__(self):
        sizes = {a.size for a in (*self.input.values(), *self.joint.values())}
        if len(sizes) > 1:
            raise ValueError(f"All anchor sets must have the same K, got {sorted(sizes)}")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    kappa: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    lambda_tv: float = 1.0
    lambda_ta: float = 1.0
    lambda_va: float = 1.0
    lambda_sspc: float = 1.0
    lambda_nce: float = 1.0
    pair_weights: tuple[tuple[float, ...], ...] = DEFAULT_PAIR_WEIGHTS
    target_solver: str = "multi"

    def __post_init__(self):
        object.__setattr__(
            self, "pair_weights", tuple(tuple(float(w) for w in row) for row in self.pair_weights)
        )
        if not self.kappa > 0:
            raise ValueError(f"Temperature kappa must be > 0, got {self.kappa}")
        _check_tau(self.tau)
        if len(self.pair_weights) != 3 or any(len(row) != 3 for row in self.pair_weights):
            raise ValueError("pair_weights must be a 3 x 3 table")
        weights = [
            self.alpha,
            self.beta,
            self.lambda_tv,
            self.lambda_ta,
            self.lambda_va,
            self.lambda_sspc,
            self.lambda_nce,
            *(w for row in self.pair_weights for w in row),
        ]
        if any(w < 0 for w in weights):
            raise ValueError("Loss weights must be >= 0")
        if self.target_solver not in TARGET_SOLVERS:
            raise ValueError(f"target_solver must be one of {TARGET_SOLVERS}")

    def pair_weight(self, m: str, n: str) -> float:
        return self.pair_weights[MODALITIES.index(m)][MODALITIES.index(n)]

    @property
    def nce_weights(self) -> dict[tuple[str, str], float]:
        return dict(zip(NCE_PAIRS, (self.lambda_tv, self.lambda_ta, self.lambda_va)))

    def replace(self, **changes) -> LossConfig:
        return dataclasses.replace(self, **changes)


# Similarities


def scaled_cosine(a, b, tau: float) -> float:
    """Cosine similarity divided by tau: a.b / (tau |a| |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        raise ZeroNormError("Cosine similarity is undefined for a zero-norm vector")
    return float(a @ b / (tau * norm))


def exp_sim(a, b, tau: float) -> float:
    _check_tau(tau)
    return math.exp(scaled_cosine(a, b, tau))


def scaled_cosine_matrix(vectors: np.ndarray, anchors: np.ndarray, tau: float) -> np.ndarray:
    """N x K matrix of scaled cosines between sample rows and anchor rows."""
    vectors_n = vectors / _row_norms(vectors, "vectors")[:, None]
    anchors_n = anchors / _row_norms(anchors, "anchors")[:, None]
    return vectors_n @ anchors_n.T / tau


def _cosine_backward(vectors, anchors, grad_logits, tau):
    """Backpropagate d(loss)/d(logits) of scaled_cosine_matrix to both inputs."""
    v_norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    z_norms = np.linalg.norm(anchors, axis=1, keepdims=True)
    vectors_n = vectors / v_norms
    anchors_n = anchors / z_norms
    grad_vn = grad_logits @ anchors_n / tau
    grad_zn = grad_logits.T @ vectors_n / tau
    grad_v = (grad_vn - vectors_n * np.sum(grad_vn * vectors_n, axis=1, keepdims=True)) / v_norms
    grad_z = (grad_zn - anchors_n * np.sum(grad_zn * anchors_n, axis=1, keepdims=True)) / z_norms
    return grad_v, grad_z


# Binary cross-entropy


def _as_array(m) -> np.ndarray:
    return m.data if isinstance(m, DenseMatrix) else np.asarray(m, dtype=np.float64)


def _check_bce_inputs(logits: np.ndarray, targets: np.ndarray) -> None:
    if logits.shape != targets.shape:
        raise ValueError(f"Shape mismatch: logits {logits.shape} vs targets {targets.shape}")
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("BCE targets must lie in [0, 1]")


def bce_with_logits(logits, targets) -> float:
    """Mean of max(x, 0) - x*t + log(1 + exp(-|x|)) over all elements."""
    x = _as_array(logits)
    t = _as_array(targets)
    _check_bce_inputs(x, t)
    return float(np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))))


def bce_with_logits_grad(logits, targets) -> np.ndarray:
    x = _as_array(logits)
    t = _as_array(targets)
    _check_bce_inputs(x, t)
    return (expit(x) - t) / x.size


# Contrastive loss


def _check_pair(x: EmbeddingBatch, y: EmbeddingBatch) -> None:
    if x.vectors.shape != y.vectors.shape:
        raise ValueError(f"Batch mismatch: {x.vectors.shape} vs {y.vectors.shape}")


def nce_loss(x: EmbeddingBatch, y: EmbeddingBatch, kappa: float) -> float:
    """Symmetric InfoNCE over in-batch negatives, averaging the x->y and y->x directions."""
    _check_pair(x, y)
    logits = x.vectors @ y.vectors.T / kappa
    positives = np.diag(logits)
    forward = np.mean(logsumexp(logits, axis=1) - positives)
    backward = np.mean(logsumexp(logits, axis=0) - positives)
    return float(0.5 * (forward + backward))


def nce_loss_grad(x: EmbeddingBatch, y: EmbeddingBatch, kappa: float):
    """Gradients of nce_loss with respect to x and y vectors."""
    _check_pair(x, y)
    n = len(x)
    logits = x.vectors @ y.vectors.T / kappa
    eye = np.eye(n)
    grad_logits = 0.5 / n * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye))
    return grad_logits @ y.vectors / kappa, grad_logits.T @ x.vectors / kappa


# Assignment targets


def assignment_targets(
    vectors: np.ndarray,
    anchors: np.ndarray,
    solver: SolverConfig,
    tau: float,
    target_solver: str = "multi",
    context: np.ndarray | None = None,
) -> np.ndarray:
    """
    Solve for anchor assignments of a batch, optionally alongside extra context rows.

    The exp-scaled cosine similarities of context rows followed by batch rows are fed
    to the assignment solver; only the batch rows of the result are returned.
    """
    _check_tau(tau)
    rows = vectors if context is None or len(context) == 0 else np.vstack([context, vectors])
    similarity = np.exp(scaled_cosine_matrix(rows, anchors, tau))
    if target_solver == "modified":
        q, _ = modified_sinkhorn(similarity, solver)
        targets = np.clip(q.data, 0.0, 1.0)
    else:
        _, q, _ = multi_sinkhorn(similarity, solver)
        targets = q.data
    return np.array(targets[-len(vectors) :])


@dataclass(frozen=True)
class SSPCTargets:
    """Targets of one consistency pair: for_src supervises the src logits."""

    for_src: np.ndarray
    for_dst: np.ndarray


def pair_targets(
    src: EmbeddingBatch,
    dst: EmbeddingBatch,
    z_src: AnchorSet,
    z_dst: AnchorSet,
    solver: SolverConfig,
    cfg: LossConfig,
) -> SSPCTargets:
    return SSPCTargets(
        for_src=assignment_targets(dst.vectors, z_dst.vectors, solver, cfg.tau, cfg.target_solver),
        for_dst=assignment_targets(src.vectors, z_src.vectors, solver, cfg.tau, cfg.target_solver),
    )


def _check_sspc_pair(src, dst, z_src, z_dst) -> None:
    if len(src) != len(dst):
        raise ValueError(f"Batch-size mismatch: {len(src)} vs {len(dst)}")
    if z_src.size != z_dst.size:
        raise ValueError(f"Anchor-count mismatch: {z_src.size} vs {z_dst.size}")


def sspc_pair_loss(
    src: EmbeddingBatch,
    dst: EmbeddingBatch,
    z_src: AnchorSet,
    z_dst: AnchorSet,
    solver: SolverConfig,
    cfg: LossConfig,
    targets: SSPCTargets | None = None,
) -> float:
    """
    Consistency between anchor assignments of src and dst.

    alpha * g(logits_src, M(exp_sim_dst)) + beta * g(logits_dst, M(exp_sim_src)), with g
    the BCE-with-logits and M the assignment solver.
    """
    _check_sspc_pair(src, dst, z_src, z_dst)
    targets = targets or pair_targets(src, dst, z_src, z_dst, solver, cfg)
    logits_src = scaled_cosine_matrix(src.vectors, z_src.vectors, cfg.tau)
    logits_dst = scaled_cosine_matrix(dst.vectors, z_dst.vectors, cfg.tau)
    return cfg.alpha * bce_with_logits(logits_src, targets.for_src) + cfg.beta * bce_with_logits(
        logits_dst, targets.for_dst
    )


@dataclass(frozen=True)
class PairGradients:
    src: np.ndarray
    dst: np.ndarray
    z_src: np.ndarray
    z_dst: np.ndarray


def sspc_pair_loss_grad(
    src: EmbeddingBatch,
    dst: EmbeddingBatch,
    z_src: AnchorSet,
    z_dst: AnchorSet,
    cfg: LossConfig,
    targets: SSPCTargets,
) -> PairGradients:
    _check_sspc_pair(src, dst, z_src, z_dst)
    logits_src = scaled_cosine_matrix(src.vectors, z_src.vectors, cfg.tau)
    logits_dst = scaled_cosine_matrix(dst.vectors, z_dst.vectors, cfg.tau)
    g_src = cfg.alpha * bce_with_logits_grad(logits_src, targets.for_src)
    g_dst = cfg.beta * bce_with_logits_grad(logits_dst, targets.for_dst)
    d_src, d_zsrc = _cosine_backward(src.vectors, z_src.vectors, g_src, cfg.tau)
    d_dst, d_zdst = _cosine_backward(dst.vectors, z_dst.vectors, g_dst, cfg.tau)
    return PairGradients(d_src, d_dst, d_zsrc, d_zdst)


# Full objective


Contexts = Mapping[tuple[str, str], np.ndarray]


@dataclass(frozen=True)
class SSPCTargetSet:
    """
    Targets for every active consistency pair.

    input_targets[m] = M(sim(m, z_m)); joint_targets[(n, m)] = M(sim(n_hat, z_hat_m)).
    """

    input_targets: Mapping[str, np.ndarray] = field(default_factory=dict)
    joint_targets: Mapping[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def for_pair(self, m: str, n: str) -> SSPCTargets:
        return SSPCTargets(for_src=self.joint_targets[(n, m)], for_dst=self.input_targets[m])


def active_pairs(cfg: LossConfig) -> list[tuple[str, str]]:
    if cfg.lambda_sspc == 0:
        return []
    return [(m, n) for m in MODALITIES for n in MODALITIES if cfg.pair_weight(m, n) > 0]


def compute_sspc_targets(
    batches: ModalityBatches,
    anchors: ModalityAnchors,
    solver: SolverConfig,
    cfg: LossConfig,
    contexts: Contexts | None = None,
    workers: int = 1,
) -> SSPCTargetSet:
    """
    Solve every distinct assignment problem needed by the active consistency pairs.

    Jobs are gathered in a fixed order, so the result does not depend on ``workers``.
    """
    contexts = contexts or {}
    pairs = active_pairs(cfg)
    input_keys = sorted({m for m, _ in pairs}, key=MODALITIES.index)
    joint_keys = sorted({(n, m) for m, n in pairs})
    jobs = [
        (batches.input[m].vectors, anchors.input[m].vectors, contexts.get(("input", m)))
        for m in input_keys
    ] + [
        (batches.joint[n].vectors, anchors.joint[m].vectors, contexts.get(("joint", n)))
        for n, m in joint_keys
    ]

    def run(job):
        vectors, anchor_vectors, context = job
        return assignment_targets(
            vectors, anchor_vectors, solver, cfg.tau, cfg.target_solver, context
        )

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    return SSPCTargetSet(
        input_targets=dict(zip(input_keys, results[: len(input_keys)])),
        joint_targets=dict(zip(joint_keys, results[len(input_keys) :])),
    )


def sspc_total(
    batches: ModalityBatches,
    anchors: ModalityAnchors,
    solver: SolverConfig,
    cfg: LossConfig,
    targets: SSPCTargetSet | None = None,
) -> float:
    """Weighted sum of the nine consistency pairs L(m, n_hat, z_m, z_hat_m)."""
    pairs = active_pairs(cfg.replace(lambda_sspc=1.0))
    if targets is None:
        targets = compute_sspc_targets(batches, anchors, solver, cfg.replace(lambda_sspc=1.0))
    total = 0.0
    for m, n in pairs:
        total += cfg.pair_weight(m, n) * sspc_pair_loss(
            batches.input[m],
            batches.joint[n],
            anchors.input[m],
            anchors.joint[m],
            solver,
            cfg,
            targets=targets.for_pair(m, n),
        )
    return total


def nce_total(batches: ModalityBatches, cfg: LossConfig) -> float:
    return sum(
        weight * nce_loss(batches.joint[x], batches.joint[y], cfg.kappa)
        for (x, y), weight in cfg.nce_weights.items()
    )


@dataclass(frozen=True)
class LossTerms:
    total: float
    sspc: float
    nce: float


def loss_terms(
    batches: ModalityBatches,
    anchors: ModalityAnchors,
    solver: SolverConfig,
    cfg: LossConfig,
    targets: SSPCTargetSet | None = None,
) -> LossTerms:
    sspc = sspc_total(batches, anchors, solver, cfg, targets) if active_pairs(cfg) else 0.0
    nce = nce_total(batches, cfg) if cfg.lambda_nce > 0 else 0.0
    return LossTerms(cfg.lambda_sspc * sspc + cfg.lambda_nce * nce, sspc, nce)


def total_loss(
    batches: ModalityBatches,
    anchors: ModalityAnchors,
    solver: SolverConfig,
    cfg: LossConfig,
    targets: SSPCTargetSet | None = None,
) -> float:
    """lambda_sspc * L_sspc + lambda_nce * (lambda_tv L_tv + lambda_ta L_ta + lambda_va L_va)."""
    return loss_terms(batches, anchors, solver, cfg, targets).total


@dataclass(frozen=True)
class LossGradients:
    terms: LossTerms
    joint: dict[str, np.ndarray]
    input_anchors: dict[str, np.ndarray]
    joint_anchors: dict[str, np.ndarray]


def loss_gradients(
    batches: ModalityBatches,
    anchors: ModalityAnchors,
    solver: SolverConfig,
    cfg: LossConfig,
    targets: SSPCTargetSet | None = None,
) -> LossGradients:
    """
    Value and analytic gradients of total_loss.

    Gradients are taken with respect to the joint-space embeddings and every anchor
    set, holding the assignment targets fixed.
    """
    joint = {m: np.zeros_like(batches.joint[m].vectors) for m in batches.joint}
    input_anchors = {m: np.zeros_like(anchors.input[m].vectors) for m in anchors.input}
    joint_anchors = {m: np.zeros_like(anchors.joint[m].vectors) for m in anchors.joint}

    pairs = active_pairs(cfg)
    if pairs and targets is None:
        targets = compute_sspc_targets(batches, anchors, solver, cfg)

    sspc = 0.0
    for m, n in pairs:
        src, dst = batches.input[m], batches.joint[n]
        z_src, z_dst = anchors.input[m], anchors.joint[m]
        pair_target = targets.for_pair(m, n)
        weight = cfg.pair_weight(m, n)
        sspc += weight * sspc_pair_loss(src, dst, z_src, z_dst, solver, cfg, pair_target)
        grads = sspc_pair_loss_grad(src, dst, z_src, z_dst, cfg, pair_target)
        scale = cfg.lambda_sspc * weight
        joint[n] += scale * grads.dst
        input_anchors[m] += scale * grads.z_src
        joint_anchors[m] += scale * grads.z_dst

    nce = 0.0
    if cfg.lambda_nce > 0:
        for (x, y), weight in cfg.nce_weights.items():
            if weight == 0:
                continue
            nce += weight * nce_loss(batches.joint[x], batches.joint[y], cfg.kappa)
            grad_x, grad_y = nce_loss_grad(batches.joint[x], batches.joint[y], cfg.kappa)
            joint[x] += cfg.lambda_nce * weight * grad_x
            joint[y] += cfg.lambda_nce * weight * grad_y

    terms = LossTerms(cfg.lambda_sspc * sspc + cfg.lambda_nce * nce, sspc, nce)
    return LossGradients(terms, joint, input_anchors, joint_anchors)
