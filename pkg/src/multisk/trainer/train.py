"""Toy multi-modal training loop driven by the SSPC + NCE objective."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..losses import (
    MODALITIES,
    AnchorSet,
    EmbeddingBatch,
    LossConfig,
    ModalityAnchors,
    ModalityBatches,
    active_pairs,
    compute_sspc_targets,
    loss_gradients,
    loss_terms,
)
from ..sinkhorn import SolverConfig
from .data import SyntheticDataset, SyntheticDatasetSpec, split_dataset
from .heads import PARAMETER_NAMES, ProjectionHead, init_anchor_set
from .memory import MemoryBank
from .metrics import retrieval_eval, structure_preservation_score

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_sspc", "no_cm_sspc", "modified_sk")
OPTIMIZERS = ("sgd", "adam")

# Few plain sweeps per step; partially balanced targets are accepted during training.
DEFAULT_TRAIN_SOLVER = SolverConfig(
    epsilon=0.05, max_iters=20, tol=1e-6, mu=0.25, k_prime=8, relaxation=1.0
)


def desk_loss_config() -> LossConfig:
    """
    Loss weights for the small synthetic runs.

    The consistency BCE is a mean over N x K cells, so its gradient is an order
    of magnitude weaker than the contrastive term's at the published weight.
    """
    return LossConfig(lambda_sspc=10.0)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"Loss became non-finite ({loss}) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters at desk scale.

    ``k_prime`` overrides ``solver.k_prime``. ``published_scale()`` gives the
    published batch/learning-rate/anchor settings and loss weights.
    """

    batch_size: int = 64
    epochs: int = 5
    learning_rate: float = 0.1
    lr_decay: float = 0.9
    n_anchors: int = 16
    k_prime: int = 8
    d_joint: int = 16
    bank_capacity: int = 256
    optimizer: str = "sgd"
    held_out_fraction: float = 0.2
    workers: int = 1
    seed: int = 0
    solver: SolverConfig = DEFAULT_TRAIN_SOLVER
    loss: LossConfig = field(default_factory=desk_loss_config)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)

    def __post_init__(self):
        positive = {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "n_anchors": self.n_anchors,
            "k_prime": self.k_prime,
            "d_joint": self.d_joint,
            "workers": self.workers,
            "lr_decay": self.lr_decay,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.bank_capacity < 0:
            raise ValueError(f"bank_capacity must be >= 0, got {self.bank_capacity}")
        if self.k_prime > self.n_anchors:
            raise ValueError(
                f"k_prime ({self.k_prime}) must not exceed n_anchors ({self.n_anchors})"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 < self.held_out_fraction < 1:
            raise ValueError("held_out_fraction must be in (0, 1)")
        if self.solver.k_prime != self.k_prime:
            object.__setattr__(self, "solver", self.solver.replace(k_prime=self.k_prime))

    @classmethod
    def published_scale(cls, **changes) -> TrainConfig:
        settings = dict(
            batch_size=216,
            learning_rate=5e-5,
            optimizer="adam",
            n_anchors=64,
            k_prime=32,
            bank_capacity=5500,
            loss=LossConfig(),
        )
        settings.update(changes)
        return cls(**settings)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


def apply_ablation(cfg: TrainConfig, ablation: str) -> TrainConfig:
    """Config for one ablation variant."""
    if ablation == "full":
        return cfg
    if ablation == "no_sspc":
        return cfg.replace(loss=cfg.loss.replace(lambda_sspc=0.0))
    if ablation == "no_cm_sspc":
        weights = tuple(
            tuple(w if i == j else 0.0 for j, w in enumerate(row))
            for i, row in enumerate(cfg.loss.pair_weights)
        )
        return cfg.replace(loss=cfg.loss.replace(pair_weights=weights))
    if ablation == "modified_sk":
        return cfg.replace(loss=cfg.loss.replace(target_solver="modified"))
    raise ValueError(f"Unknown ablation {ablation!r}; expected one of {ABLATIONS}")


@dataclass(eq=False)
class MultiModalModel:
    """One projection head per modality plus input-space and joint-space anchors."""

    heads: dict[str, ProjectionHead]
    anchors: dict[tuple[str, str], np.ndarray]

    @classmethod
    def init(cls, dims: dict[str, int], cfg: TrainConfig, rng: np.random.Generator):
        heads = {m: ProjectionHead.init(dims[m], cfg.d_joint, rng) for m in MODALITIES}
        anchors = {}
        for m in MODALITIES:
            for space, dim in (("input", dims[m]), ("joint", cfg.d_joint)):
                anchors[(space, m)] = init_anchor_set(cfg.n_anchors, dim, m, space, rng).vectors
        return cls(heads, anchors)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat view of every trainable array; updating these updates the model."""
        params = {
            f"head.{m}.{name}": value
            for m, head in self.heads.items()
            for name, value in head.parameters().items()
        }
        params.update({f"anchor.{space}.{m}": z for (space, m), z in self.anchors.items()})
        return params

    def anchor_sets(self) -> ModalityAnchors:
        return ModalityAnchors(
            input={m: AnchorSet(self.anchors[("input", m)], m, "input") for m in MODALITIES},
            joint={m: AnchorSet(self.anchors[("joint", m)], m, "joint") for m in MODALITIES},
        )

    def project(self, features: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {m: self.heads[m](features[m]) for m in MODALITIES}

    def normalize_anchors(self) -> None:
        for z in self.anchors.values():
            z /= np.linalg.norm(z, axis=1, keepdims=True)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(f, **self.parameters())

    @classmethod
    def load(cls, path: str | Path) -> MultiModalModel:
        with np.load(path) as archive:
            arrays = {key: archive[key] for key in archive.files}
        heads = {
            m: ProjectionHead(*(arrays[f"head.{m}.{name}"] for name in PARAMETER_NAMES))
            for m in MODALITIES
        }
        anchors = {
            (space, m): arrays[f"anchor.{space}.{m}"]
            for space in ("input", "joint")
            for m in MODALITIES
        }
        return cls(heads, anchors)


class SGD:
    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for name, grad in grads.items():
            params[name] -= lr * grad


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        for name, grad in grads.items():
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad**2
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str) -> SGD | Adam:
    return Adam() if name == "adam" else SGD()


def _batches(features: dict[str, np.ndarray], joint: dict[str, np.ndarray]) -> ModalityBatches:
    return ModalityBatches(
        input={m: EmbeddingBatch(features[m], m, "input") for m in MODALITIES},
        joint={m: EmbeddingBatch(joint[m], m, "joint") for m in MODALITIES},
    )


def evaluate(model: MultiModalModel, data: SyntheticDataset, cfg: TrainConfig) -> dict:
    """
    Losses, structure score and text-to-video retrieval on ``data``.

    No memory bank is used, so the result depends only on the model and the data.
    ``loss_sspc`` is None when the consistency term is switched off.
    """
    joint = model.project(data.features)
    batches = _batches(data.features, joint)
    terms = loss_terms(batches, model.anchor_sets(), cfg.solver, cfg.loss)
    structure = float(
        np.mean([structure_preservation_score(data.features[m], joint[m]) for m in MODALITIES])
    )
    retrieval = retrieval_eval(joint["t"], joint["v"])
    return {
        "loss_total": terms.total,
        "loss_sspc": terms.sspc if cfg.loss.lambda_sspc > 0 else None,
        "loss_nce": terms.nce,
        "structure_score": structure,
        **retrieval.to_dict(),
    }


@dataclass
class TrainResult:
    model: MultiModalModel
    history: list[dict] = field(default_factory=list)
    data_checksum: str = ""

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


def _train_step(
    model: MultiModalModel,
    features: dict[str, np.ndarray],
    bank: MemoryBank,
    optimizer: SGD | Adam,
    lr: float,
    cfg: TrainConfig,
) -> float:
    joint, caches = {}, {}
    for m in MODALITIES:
        joint[m], caches[m] = model.heads[m].forward(features[m])
    batches = _batches(features, joint)
    anchors = model.anchor_sets()

    targets = None
    if active_pairs(cfg.loss):
        targets = compute_sspc_targets(
            batches, anchors, cfg.solver, cfg.loss, bank.contexts(), cfg.workers
        )
    grads = loss_gradients(batches, anchors, cfg.solver, cfg.loss, targets)
    loss = grads.terms.total
    if not math.isfinite(loss):
        return loss

    param_grads = {}
    for m in MODALITIES:
        for name, grad in model.heads[m].backward(caches[m], grads.joint[m]).items():
            param_grads[f"head.{m}.{name}"] = grad
        param_grads[f"anchor.input.{m}"] = grads.input_anchors[m]
        param_grads[f"anchor.joint.{m}"] = grads.joint_anchors[m]
    optimizer.step(model.parameters(), param_grads, lr)
    model.normalize_anchors()

    for m in MODALITIES:
        bank.push(("input", m), features[m])
        bank.push(("joint", m), joint[m])
    return loss


def train(data: SyntheticDataset, cfg: TrainConfig, ablation: str = "full") -> TrainResult:
    """
    Train heads and anchors on the training split of ``data``.

    Each step solves the anchor assignments over memory bank plus batch, takes one
    optimizer step on the batch rows and then pushes the batch into the bank. After
    every epoch the held-out split is evaluated and one metrics record is appended.

    Raises:
        TrainingDivergedError: If the training loss becomes non-finite.
        ValueError: If the batch is larger than the training split.
    """
    cfg = apply_ablation(cfg, ablation)
    train_split, held_out = split_dataset(data, cfg.held_out_fraction, cfg.seed)
    if cfg.batch_size > len(train_split):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds the {len(train_split)} training samples"
        )

    rng = np.random.default_rng(cfg.seed)
    dims = {m: x.shape[1] for m, x in data.features.items()}
    model = MultiModalModel.init(dims, cfg, rng)
    optimizer = make_optimizer(cfg.optimizer)
    bank = MemoryBank(cfg.bank_capacity)
    result = TrainResult(model, data_checksum=data.checksum())
    n_steps = len(train_split) // cfg.batch_size

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
        order = rng.permutation(len(train_split))
        running = 0.0
        for step in range(n_steps):
            index = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            features = {m: train_split.features[m][index] for m in MODALITIES}
            loss = _train_step(model, features, bank, optimizer, lr, cfg)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            running += loss

        record = {"epoch": epoch, **evaluate(model, held_out, cfg)}
        record["train_loss"] = running / n_steps
        if not math.isfinite(record["loss_total"]):
            raise TrainingDivergedError(epoch, n_steps, record["loss_total"])
        result.history.append(record)
        logger.info(
            "epoch %d/%d: held-out loss %.6f, structure %.4f, R@5 %.3f (%s)",
            epoch,
            cfg.epochs,
            record["loss_total"],
            record["structure_score"],
            record["r_at_5"],
            ablation,
        )
    return result
