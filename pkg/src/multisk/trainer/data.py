"""Synthetic weakly aligned text/video/audio features."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..losses import MODALITIES


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """
    Recipe for a synthetic three-modality dataset.

    Every sample carries one shared concept. The concepts live in a latent space of
    ``concept_rank`` dimensions that every modality embeds through its own orthonormal
    map, so concept geometry agrees across modalities while coordinates do not. Each
    modality then adds one modality-private offset and Gaussian noise.
    A ``misalignment_rate`` fraction of samples gets resampled video and audio concepts,
    emulating weakly aligned narrated clips.
    """

    n_samples: int = 2048
    d_input: tuple[int, ...] = (16, 16, 16)
    n_shared_concepts: int = 8
    n_private_concepts: int = 4
    noise_sigma: float = 0.1
    misalignment_rate: float = 0.1
    private_scale: float = 0.5
    concept_rank: int = 4
    seed: int = 0

    def __post_init__(self):
        d_input = self.d_input
        if isinstance(d_input, int):
            d_input = (d_input,) * len(MODALITIES)
        object.__setattr__(self, "d_input", tuple(int(d) for d in d_input))
        if len(self.d_input) != len(MODALITIES) or min(self.d_input) < 1:
            raise ValueError(f"d_input needs one positive width per modality, got {d_input}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_shared_concepts < 1:
            raise ValueError(f"n_shared_concepts must be >= 1, got {self.n_shared_concepts}")
        if self.concept_rank < 1:
            raise ValueError(f"concept_rank must be >= 1, got {self.concept_rank}")
        if self.n_private_concepts < 0:
            raise ValueError(f"n_private_concepts must be >= 0, got {self.n_private_concepts}")
        if self.noise_sigma < 0 or self.private_scale < 0:
            raise ValueError("noise_sigma and private_scale must be >= 0")
        if not 0 <= self.misalignment_rate < 1:
            raise ValueError(f"misalignment_rate must be in [0, 1), got {self.misalignment_rate}")

    def dims(self) -> dict[str, int]:
        return dict(zip(MODALITIES, self.d_input))


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Input-space features per modality plus the labels they were drawn from."""

    features: dict[str, np.ndarray]
    labels: np.ndarray
    modality_labels: dict[str, np.ndarray] = field(repr=False)
    misaligned: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> SyntheticDataset:
        return SyntheticDataset(
            features={m: x[indices] for m, x in self.features.items()},
            labels=self.labels[indices],
            modality_labels={m: y[indices] for m, y in self.modality_labels.items()},
            misaligned=self.misaligned[indices],
        )

    def checksum(self) -> str:
        """SHA-256 over the feature arrays, in modality order."""
        digest = hashlib.sha256()
        for m in MODALITIES:
            digest.update(np.ascontiguousarray(self.features[m]).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        return digest.hexdigest()


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """
    Draw a dataset from ``spec``. The same spec always yields bit-identical arrays.

    With ``noise_sigma=0`` and no private concepts every modality is a deterministic
    function of its concept label.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims()
    rank = min(spec.concept_rank, *spec.d_input)
    latent = _unit_rows(rng, spec.n_shared_concepts, rank)
    # Orthonormal columns keep the concept rows unit length.
    concepts = {
        m: latent @ np.linalg.qr(rng.standard_normal((dims[m], rank)))[0].T for m in MODALITIES
    }
    privates = {
        m: spec.private_scale * _unit_rows(rng, spec.n_private_concepts, dims[m])
        for m in MODALITIES
        if spec.n_private_concepts
    }

    n = spec.n_samples
    labels = rng.integers(spec.n_shared_concepts, size=n)
    misaligned = rng.random(n) < spec.misalignment_rate
    modality_labels = {"t": labels.copy()}
    for m in MODALITIES[1:]:
        partner = rng.integers(spec.n_shared_concepts, size=n)
        modality_labels[m] = np.where(misaligned, partner, labels)

    features = {}
    for m in MODALITIES:
        x = concepts[m][modality_labels[m]]
        if spec.n_private_concepts:
            x = x + privates[m][rng.integers(spec.n_private_concepts, size=n)]
        if spec.noise_sigma:
            x = x + spec.noise_sigma * rng.standard_normal((n, dims[m]))
        features[m] = x
    return SyntheticDataset(features, labels, modality_labels, misaligned)


def split_dataset(
    data: SyntheticDataset, held_out_fraction: float, seed: int
) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Shuffle with ``seed`` and cut off the last ``held_out_fraction`` as the held-out split."""
    if not 0 < held_out_fraction < 1:
        raise ValueError(f"held_out_fraction must be in (0, 1), got {held_out_fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    n_held_out = max(1, int(round(held_out_fraction * len(data))))
    if n_held_out >= len(data):
        raise ValueError(f"Dataset of {len(data)} samples is too small to split")
    return data.subset(order[:-n_held_out]), data.subset(order[-n_held_out:])
