"""Tests for structure-preservation and retrieval metrics."""

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from multisk.losses import EmbeddingBatch
from multisk.trainer.metrics import (
    DegenerateSimilarityError,
    full_video_retrieval_eval,
    metrics_from_ranks,
    ranks_from_similarity,
    retrieval_eval,
    structure_preservation_score,
)


def _brute_force_ranks(similarity, targets):
    ranks = []
    for i, target in enumerate(targets):
        order = sorted(range(similarity.shape[1]), key=lambda j: (-similarity[i, j], j))
        ranks.append(order.index(target) + 1)
    return np.array(ranks)


class TestStructurePreservation:
    """Tests for structure_preservation_score."""

    def test_identical_batches(self):
        x = np.random.default_rng(0).standard_normal((16, 8))
        assert structure_preservation_score(x, x) == pytest.approx(1.0)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((16, 8))
        rotation = special_ortho_group.rvs(8, random_state=2)

        assert structure_preservation_score(x, x @ rotation) == pytest.approx(1.0, abs=1e-12)

    def test_positive_row_scaling_invariant(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((16, 8))
        scales = rng.uniform(0.1, 10.0, size=(16, 1))

        assert structure_preservation_score(x, scales * x) == pytest.approx(1.0, abs=1e-12)

    def test_accepts_embedding_batches(self):
        x = np.random.default_rng(4).standard_normal((5, 3))
        score = structure_preservation_score(
            EmbeddingBatch(x, "t", "input"), EmbeddingBatch(x, "t", "joint")
        )
        assert score == pytest.approx(1.0)

    def test_independent_batches_are_uncorrelated(self):
        rng = np.random.default_rng(5)
        x, y = rng.standard_normal((64, 16)), rng.standard_normal((64, 16))
        assert abs(structure_preservation_score(x, y)) < 0.2

    def test_constant_similarities(self):
        x = np.ones((4, 3))
        y = np.random.default_rng(6).standard_normal((4, 3))
        with pytest.raises(DegenerateSimilarityError):
            structure_preservation_score(x, y)

    def test_two_samples_are_degenerate(self):
        x = np.random.default_rng(7).standard_normal((2, 3))
        with pytest.raises(DegenerateSimilarityError):
            structure_preservation_score(x, x)

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            structure_preservation_score(np.ones((3, 2)), np.ones((4, 2)))


class TestRanks:
    """Tests for rank computation and the derived metrics."""

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            similarity = rng.integers(0, 3, size=(n, n)).astype(float)
            targets = rng.integers(0, n, size=n)

            np.testing.assert_array_equal(
                ranks_from_similarity(similarity, targets), _brute_force_ranks(similarity, targets)
            )

    def test_all_equal_scores(self):
        metrics = metrics_from_ranks(ranks_from_similarity(np.zeros((4, 4))))

        assert metrics.r_at_1 == 0.25
        assert metrics.med_r == 2.5
        assert metrics.mean_r == 2.5

    def test_perfect_retrieval(self):
        x = np.eye(6)

        metrics = retrieval_eval(x, x)

        assert metrics.r_at_1 == 1.0
        assert metrics.r_at_10 == 1.0
        assert (metrics.med_r, metrics.mean_r) == (1.0, 1.0)

    def test_recall_cutoffs(self):
        metrics = metrics_from_ranks([1, 3, 7, 12])
        assert metrics.to_dict() == {
            "r_at_1": 0.25,
            "r_at_5": 0.5,
            "r_at_10": 0.75,
            "med_r": 5.0,
            "mean_r": 5.75,
        }

    def test_zero_queries(self):
        with pytest.raises(ValueError):
            metrics_from_ranks([])

    def test_retrieval_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            retrieval_eval(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_retrieval_size_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            retrieval_eval(np.ones((2, 3)), np.ones((3, 3)))


class TestFullVideoRetrieval:
    """Tests for video-level retrieval from clip similarities."""

    def test_one_clip_per_video(self):
        metrics = full_video_retrieval_eval(np.eye(3), [0, 1, 2], [0, 1, 2])
        assert metrics.r_at_1 == 1.0

    def test_video_score_is_best_clip(self):
        sim = np.array([[0.1, 0.9, 0.5], [0.8, 0.0, 0.3]])

        metrics = full_video_retrieval_eval(sim, ["a", "a", "b"], ["a", "b"])

        assert metrics.r_at_1 == 0.5
        assert metrics.mean_r == 1.5

    def test_captions_of_a_video_are_averaged(self):
        sim = np.array([[1.0, 0.1], [0.0, 0.8], [0.0, 1.0]])

        metrics = full_video_retrieval_eval(sim, ["a", "b"], ["a", "a", "b"])

        assert metrics.r_at_1 == 1.0

    def test_ties_follow_sorted_video_ids(self):
        metrics = full_video_retrieval_eval(np.zeros((2, 2)), {0: "b", 1: "a"}, {0: "a", 1: "b"})
        assert metrics.mean_r == 1.5
        assert metrics.r_at_1 == 0.5

    def test_unmapped_caption(self):
        with pytest.raises(ValueError, match="caption"):
            full_video_retrieval_eval(np.zeros((2, 2)), [0, 1], {0: 0})

    def test_caption_video_without_clips(self):
        with pytest.raises(ValueError, match="without clips"):
            full_video_retrieval_eval(np.zeros((1, 2)), [0, 1], [7])
