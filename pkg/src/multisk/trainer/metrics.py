"""Evaluation: structure preservation and retrieval recall/rank metrics."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import pearsonr

from ..losses import EmbeddingBatch
from ..matrix_io import DenseMatrix

RECALL_CUTOFFS = (1, 5, 10)


class DegenerateSimilarityError(ValueError):
    """Raised when a pairwise similarity matrix is constant, so correlation is undefined."""


@dataclass(frozen=True)
class RetrievalMetrics:
    r_at_1: float
    r_at_5: float
    r_at_10: float
    med_r: float
    mean_r: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _vectors(batch: EmbeddingBatch | np.ndarray) -> np.ndarray:
    if isinstance(batch, EmbeddingBatch):
        return batch.vectors
    return np.asarray(batch, dtype=np.float64)


def _pairwise_cosines(x: np.ndarray) -> np.ndarray:
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    return (unit @ unit.T)[np.triu_indices(len(x), k=1)]


def structure_preservation_score(
    input_batch: EmbeddingBatch | np.ndarray, joint_batch: EmbeddingBatch | np.ndarray
) -> float:
    """
    Pearson correlation between the pairwise cosine structure of two batches.

    Only the strict upper triangle of each N x N cosine matrix is compared, so the
    score is invariant to orthogonal transforms and positive scaling of either batch.

    Raises:
        ValueError: If the batches differ in size.
        DegenerateSimilarityError: If either cosine matrix is constant.
    """
    x, y = _vectors(input_batch), _vectors(joint_batch)
    if len(x) != len(y):
        raise ValueError(f"Batch-size mismatch: {len(x)} vs {len(y)}")
    cos_x, cos_y = _pairwise_cosines(x), _pairwise_cosines(y)
    if cos_x.size < 2 or np.ptp(cos_x) == 0 or np.ptp(cos_y) == 0:
        raise DegenerateSimilarityError(
            "Pairwise similarities are constant; structure correlation is undefined"
        )
    return float(np.clip(pearsonr(cos_x, cos_y).statistic, -1.0, 1.0))


def ranks_from_similarity(similarity: np.ndarray, targets: Sequence[int] | None = None):
    """
    1-based rank of each query's target under descending similarity.

    Ties are broken by ascending gallery index. ``targets`` defaults to the diagonal.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    n_queries = similarity.shape[0]
    targets = np.arange(n_queries) if targets is None else np.asarray(targets)
    target_scores = similarity[np.arange(n_queries), targets][:, None]
    ahead = similarity > target_scores
    tied_before = (similarity == target_scores) & (
        np.arange(similarity.shape[1])[None, :] < targets[:, None]
    )
    return 1 + ahead.sum(axis=1) + tied_before.sum(axis=1)


def metrics_from_ranks(ranks) -> RetrievalMetrics:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("Cannot compute retrieval metrics over zero queries")
    recalls = [float(np.mean(ranks <= k)) for k in RECALL_CUTOFFS]
    return RetrievalMetrics(*recalls, float(np.median(ranks)), float(np.mean(ranks)))


def retrieval_eval(
    query: EmbeddingBatch | np.ndarray, gallery: EmbeddingBatch | np.ndarray
) -> RetrievalMetrics:
    """Index-aligned retrieval by descending dot product: R@1/5/10, MedR, MeanR."""
    q, g = _vectors(query), _vectors(gallery)
    if len(q) != len(g):
        raise ValueError(f"Query/gallery size mismatch: {len(q)} vs {len(g)}")
    if len(q) == 0:
        raise ValueError("Cannot evaluate retrieval on an empty batch")
    return metrics_from_ranks(ranks_from_similarity(q @ g.T))


def _resolve(mapping: Mapping[int, object] | Sequence, n: int, label: str) -> list:
    try:
        return [mapping[i] for i in range(n)]
    except (KeyError, IndexError):
        raise ValueError(f"Every {label} must map to a video") from None


def full_video_retrieval_eval(
    clip_similarities: DenseMatrix | np.ndarray,
    clip_to_video: Mapping[int, object] | Sequence,
    caption_to_video: Mapping[int, object] | Sequence,
) -> RetrievalMetrics:
    """
    Video-level retrieval from caption-to-clip similarities.

    A caption scores a video by its best clip. Each video with captions is a query whose
    score vector is the mean of its captions' scores; the query's own video is the target.
    Videos are ordered by sorted id, which fixes the tie-break.
    """
    if isinstance(clip_similarities, DenseMatrix):
        sim = clip_similarities.data
    else:
        sim = np.asarray(clip_similarities, dtype=np.float64)
    n_captions, n_clips = sim.shape
    clip_videos = _resolve(clip_to_video, n_clips, "clip")
    caption_videos = _resolve(caption_to_video, n_captions, "caption")
    videos = sorted(set(clip_videos))
    missing = set(caption_videos) - set(videos)
    if missing:
        raise ValueError(f"Captions reference videos without clips: {sorted(missing)}")

    clip_index = np.array([videos.index(v) for v in clip_videos])
    caption_scores = np.stack(
        [sim[:, clip_index == k].max(axis=1) for k in range(len(videos))], axis=1
    )
    caption_index = np.array([videos.index(v) for v in caption_videos])
    queries = sorted(set(caption_index.tolist()))
    video_scores = np.stack([caption_scores[caption_index == k].mean(axis=0) for k in queries])
    return metrics_from_ranks(ranks_from_similarity(video_scores, queries))
