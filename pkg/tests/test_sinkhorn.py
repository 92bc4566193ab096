"""Tests for the Sinkhorn-Knopp solver family."""

import warnings

import numpy as np
import pytest

from multisk.matrix_io import DenseMatrix, DenseTensor3
from multisk.oracle import solve_exact
from multisk.sinkhorn import (
    MarginalMismatchError,
    SolverConfig,
    assignment_objective,
    build_similarity_tensor,
    constraint_violation,
    extract_assignment,
    modified_sinkhorn,
    multi_sinkhorn,
    vanilla_sinkhorn,
)

DIAGONAL = np.array([[2.0, 1.0], [1.0, 2.0]])


def _random_instance(rng, n_range=(4, 64), k_range=(2, 16)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    k_prime = int(rng.integers(1, k + 1))
    return rng.random((n, k)), k_prime


def _check_multi_constraints(qp: np.ndarray, tol: float) -> None:
    n_channels, n_rows, _ = qp.shape
    np.testing.assert_allclose(qp.sum(axis=2), 1.0, atol=tol)
    np.testing.assert_allclose(qp.sum(axis=1), n_rows / n_channels, atol=tol)
    np.testing.assert_allclose(qp.sum(axis=0), 1.0, atol=tol)


class TestSolverConfig:
    """Tests for SolverConfig validation."""

    def test_defaults(self):
        cfg = SolverConfig()
        assert (cfg.epsilon, cfg.mu, cfg.k_prime) == (0.05, 0.25, 32)

    @pytest.mark.parametrize(
        "changes",
        [
            {"epsilon": 0.0},
            {"mu": 0.0},
            {"mu": 1.0},
            {"tol": 0.0},
            {"max_iters": 0},
            {"k_prime": 0},
            {"relaxation": 0.5},
            {"relaxation": 2.0},
        ],
    )
    def test_rejects_invalid_values(self, changes):
        with pytest.raises(ValueError):
            SolverConfig(**changes)

    def test_replace_keeps_other_fields(self):
        cfg = SolverConfig(epsilon=0.1).replace(k_prime=3)
        assert (cfg.epsilon, cfg.k_prime) == (0.1, 3)


class TestVanillaSinkhorn:
    """Tests for vanilla_sinkhorn."""

    def test_uniform_three_by_three(self):
        q, report = vanilla_sinkhorn(np.ones((3, 3)), np.ones(3), np.ones(3), SolverConfig())

        np.testing.assert_allclose(q.data, 1 / 3, atol=1e-12)
        assert report.converged

    def test_diagonal_preference_at_small_epsilon(self):
        cfg = SolverConfig(epsilon=0.01)

        q, _ = vanilla_sinkhorn(DIAGONAL, np.ones(2), np.ones(2), cfg)

        np.testing.assert_allclose(q.data, np.eye(2), atol=1e-3)

    def test_single_cell_is_forced(self):
        q, _ = vanilla_sinkhorn([[5.0]], [1.0], [1.0], SolverConfig())
        np.testing.assert_allclose(q.data, [[1.0]])

    def test_accepts_dense_matrix(self):
        q, _ = vanilla_sinkhorn(DenseMatrix(np.ones((2, 2))), [1, 1], [1, 1], SolverConfig())
        np.testing.assert_allclose(q.data, 0.5)

    def test_marginal_total_mismatch(self):
        with pytest.raises(MarginalMismatchError):
            vanilla_sinkhorn(np.ones((2, 2)), [1, 1], [1, 2], SolverConfig())

    def test_non_positive_marginals(self):
        with pytest.raises(MarginalMismatchError):
            vanilla_sinkhorn(np.ones((2, 2)), [2, 0], [1, 1], SolverConfig())

    def test_marginal_length_mismatch(self):
        with pytest.raises(MarginalMismatchError):
            vanilla_sinkhorn(np.ones((2, 3)), [1, 1], [1, 1], SolverConfig())

    def test_random_matrices_become_doubly_stochastic(self):
        rng = np.random.default_rng(5)
        cfg = SolverConfig(epsilon=0.25, tol=1e-8, max_iters=500)
        for _ in range(5):
            q, report = vanilla_sinkhorn(rng.random((32, 32)), np.ones(32), np.ones(32), cfg)

            assert report.converged
            assert report.iterations_used <= 500
            np.testing.assert_allclose(q.data.sum(axis=1), 1.0, atol=1e-8)
            np.testing.assert_allclose(q.data.sum(axis=0), 1.0, atol=1e-8)

    def test_history_has_one_entry_per_sweep(self):
        rng = np.random.default_rng(11)
        cfg = SolverConfig(epsilon=0.1, tol=1e-10, max_iters=300)

        _, report = vanilla_sinkhorn(rng.random((16, 8)), np.ones(16), np.full(8, 2.0), cfg)

        history = np.array(report.history)
        assert len(history) == report.iterations_used
        assert history[-1] < history[0]
        assert history[-1] == report.final_violation

    def test_history_never_increases(self):
        rng = np.random.default_rng(11)
        cfg = SolverConfig(epsilon=0.1, tol=1e-10, max_iters=300)

        _, report = vanilla_sinkhorn(rng.random((16, 8)), np.ones(16), np.full(8, 2.0), cfg)

        assert np.all(np.diff(report.history) <= 1e-12)

    def test_non_convergence_is_reported_not_raised(self):
        rng = np.random.default_rng(0)
        cfg = SolverConfig(epsilon=0.05, max_iters=1)

        q, report = vanilla_sinkhorn(rng.random((6, 4)), np.ones(6), np.full(4, 1.5), cfg)

        assert not report.converged
        assert report.final_violation > cfg.tol
        assert q.data.shape == (6, 4)


class TestModifiedSinkhorn:
    """Tests for the 2D modified-constraint baseline."""

    def test_uniform_four_by_four(self):
        q, report = modified_sinkhorn(np.ones((4, 4)), SolverConfig(k_prime=2))

        np.testing.assert_allclose(q.data, 0.5, atol=1e-12)
        assert report.converged

    def test_full_selection_is_all_ones(self):
        q, _ = modified_sinkhorn(np.ones((3, 4)), SolverConfig(k_prime=4))
        np.testing.assert_allclose(q.data, 1.0, atol=1e-12)

    def test_diagonal_preference(self):
        q, _ = modified_sinkhorn(DIAGONAL, SolverConfig(epsilon=0.01, k_prime=1))
        np.testing.assert_allclose(q.data, np.eye(2), atol=1e-3)

    def test_marginals(self):
        rng = np.random.default_rng(2)
        cfg = SolverConfig(epsilon=0.2, k_prime=3, tol=1e-9, max_iters=5000)

        q, report = modified_sinkhorn(rng.random((10, 5)), cfg)

        assert report.converged
        np.testing.assert_allclose(q.data.sum(axis=1), 3.0, atol=1e-8)
        np.testing.assert_allclose(q.data.sum(axis=0), 6.0, atol=1e-8)

    def test_cells_can_exceed_one(self):
        s = np.zeros((4, 3))
        s[0, 0] = 10.0
        cfg = SolverConfig(epsilon=0.5, k_prime=2, tol=1e-10, max_iters=5000)

        q, _ = modified_sinkhorn(s, cfg)

        assert q.data.max() > 1.0

    def test_k_prime_larger_than_k(self):
        with pytest.raises(ValueError, match="k_prime"):
            modified_sinkhorn(np.ones((2, 2)), SolverConfig(k_prime=3))


class TestBuildSimilarityTensor:
    """Tests for S' construction."""

    def test_first_channels_undamped(self):
        s = np.arange(8.0).reshape(2, 4)

        sp = build_similarity_tensor(s, SolverConfig(k_prime=2, mu=0.25)).data

        assert sp.shape == (4, 2, 4)
        np.testing.assert_array_equal(sp[0], s)
        np.testing.assert_array_equal(sp[1], s)
        np.testing.assert_array_equal(sp[2], 0.25 * s)
        np.testing.assert_array_equal(sp[3], 0.25 * s)

    def test_full_selection_copies_every_channel(self):
        s = np.random.default_rng(0).random((3, 3))
        sp = build_similarity_tensor(s, SolverConfig(k_prime=3)).data
        for channel in sp:
            np.testing.assert_array_equal(channel, s)

    def test_zero_matrix(self):
        sp = build_similarity_tensor(np.zeros((2, 3)), SolverConfig(k_prime=1, mu=0.7))
        assert not sp.data.any()


class TestExtractAssignment:
    """Tests for the depth-wise sum over the top channels."""

    def test_direct_sum(self):
        qp = np.array([[[0.9]], [[0.1]]])
        np.testing.assert_allclose(extract_assignment(qp, 1).data, [[0.9]])

    def test_all_channels_give_ones(self):
        qp = np.full((3, 2, 3), 1 / 3)
        np.testing.assert_allclose(extract_assignment(DenseTensor3(qp), 3).data, 1.0)

    def test_clamps_dust_only(self):
        qp = np.array([[[1.0 + 5e-13, -5e-13]], [[0.0, 1.0]]])

        q = extract_assignment(qp, 1).data

        assert q[0, 0] == 1.0
        assert q[0, 1] == 0.0


class TestMultiSinkhorn:
    """Tests for Multi-Assignment Sinkhorn-Knopp."""

    def test_full_selection_short_circuits(self):
        s = np.random.default_rng(1).random((5, 4)) + 0.1

        qp, q, report = multi_sinkhorn(s, SolverConfig(k_prime=4))

        np.testing.assert_allclose(q.data, 1.0, atol=1e-9)
        assert report.iterations_used == 0
        assert report.converged
        _check_multi_constraints(qp.data, 1e-12)

    def test_uniform_four_by_four(self):
        qp, q, report = multi_sinkhorn(np.ones((4, 4)), SolverConfig(k_prime=2, mu=0.25))

        np.testing.assert_allclose(q.data, 0.5, atol=1e-9)
        np.testing.assert_allclose(extract_assignment(qp, 2).data, 0.5, atol=1e-9)
        assert report.converged

    @pytest.mark.parametrize("n, k, k_prime", [(4, 4, 1), (6, 3, 2), (5, 8, 3)])
    def test_uniform_similarity_gives_uniform_assignment(self, n, k, k_prime):
        _, q, _ = multi_sinkhorn(np.full((n, k), 0.7), SolverConfig(k_prime=k_prime))
        np.testing.assert_allclose(q.data, k_prime / k, atol=1e-9)

    def test_diagonal_matches_oracle(self):
        cfg = SolverConfig(epsilon=0.005, k_prime=1)

        _, q, _ = multi_sinkhorn(DIAGONAL, cfg)

        np.testing.assert_allclose(q.data, np.eye(2), atol=1e-2)
        assert assignment_objective(q, DIAGONAL) >= 0.98 * 4

    def test_constraints_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            s, k_prime = _random_instance(rng, n_range=(4, 32), k_range=(2, 8))
            cfg = SolverConfig(epsilon=0.25, k_prime=k_prime, tol=1e-6, max_iters=5000)

            qp, q, report = multi_sinkhorn(s, cfg)

            assert report.converged
            assert report.final_violation == pytest.approx(constraint_violation(qp))
            _check_multi_constraints(qp.data, 1e-6)
            assert q.data.min() >= 0.0 and q.data.max() <= 1.0
            np.testing.assert_allclose(q.data.sum(axis=1), k_prime, atol=k_prime * 1e-6)
            n, k = s.shape
            np.testing.assert_allclose(q.data.sum(axis=0), n * k_prime / k, atol=k_prime * 1e-6)

    def test_converged_reports_respect_tolerance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s, k_prime = _random_instance(rng)
            cfg = SolverConfig(epsilon=0.05, k_prime=k_prime)

            qp, _, report = multi_sinkhorn(s, cfg)

            if report.converged:
                assert constraint_violation(qp) <= cfg.tol

    def test_additive_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            s, k_prime = _random_instance(rng, n_range=(4, 16), k_range=(2, 6))
            cfg = SolverConfig(epsilon=0.1, k_prime=k_prime, tol=1e-12, max_iters=2000)

            qp, _, _ = multi_sinkhorn(s, cfg)
            shifted, _, _ = multi_sinkhorn(s + rng.uniform(-3, 3), cfg)

            np.testing.assert_allclose(shifted.data, qp.data, atol=1e-8)

    def test_scale_epsilon_coupling(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            s, k_prime = _random_instance(rng, n_range=(4, 16), k_range=(2, 6))
            c = rng.uniform(0.5, 4.0)
            cfg = SolverConfig(epsilon=0.1, k_prime=k_prime, tol=1e-12, max_iters=2000)

            qp, _, _ = multi_sinkhorn(s, cfg)
            scaled, _, _ = multi_sinkhorn(c * s, cfg.replace(epsilon=0.1 * c))

            np.testing.assert_allclose(scaled.data, qp.data, atol=1e-8)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            s, k_prime = _random_instance(rng, n_range=(4, 16), k_range=(2, 6))
            cfg = SolverConfig(epsilon=0.1, k_prime=k_prime, tol=1e-12, max_iters=2000)
            rows = rng.permutation(s.shape[0])
            cols = rng.permutation(s.shape[1])

            _, q, _ = multi_sinkhorn(s, cfg)
            _, q_perm, _ = multi_sinkhorn(s[rows][:, cols], cfg)

            np.testing.assert_allclose(q_perm.data, q.data[rows][:, cols], atol=1e-10)

    def test_objective_non_increasing_in_epsilon(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            s, k_prime = _random_instance(rng, n_range=(4, 12), k_range=(2, 5))
            objectives = []
            for epsilon in (0.1, 0.2, 0.5, 1.0):
                cfg = SolverConfig(epsilon=epsilon, k_prime=k_prime, tol=1e-10, max_iters=20000)
                _, q, _ = multi_sinkhorn(s, cfg)
                objectives.append(assignment_objective(q, s))

            assert np.all(np.diff(objectives) <= 1e-6)

    def test_close_to_exact_optimum_at_small_epsilon(self):
        rng = np.random.default_rng(12)
        ratios = []
        for n in (4, 6) * 5:
            s = rng.random((n, 4))
            _, q, _ = multi_sinkhorn(s, SolverConfig(epsilon=0.005, k_prime=2))
            ratios.append(assignment_objective(q, s) / solve_exact(s, 2).objective)

        assert np.mean(np.array(ratios) >= 0.98) >= 0.9

    def test_falls_back_to_log_domain(self):
        cfg = SolverConfig(epsilon=1e-4, k_prime=1, max_iters=50)

        _, q, report = multi_sinkhorn(DIAGONAL * 10, cfg)

        assert report.log_domain
        assert np.all(np.isfinite(q.data))

    def test_log_domain_fallback_emits_no_warnings(self):
        cfg = SolverConfig(epsilon=1e-4, k_prime=1, max_iters=50)

        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            _, q, report = multi_sinkhorn(DIAGONAL * 10, cfg)

        assert report.log_domain
        assert np.all(np.isfinite(q.data))

    def test_relaxation_keeps_the_fixed_point(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            s, k_prime = _random_instance(rng, n_range=(4, 16), k_range=(2, 6))
            cfg = SolverConfig(epsilon=0.1, k_prime=k_prime, tol=1e-11, max_iters=20000)

            plain, _, _ = multi_sinkhorn(s, cfg.replace(relaxation=1.0))
            relaxed, _, _ = multi_sinkhorn(s, cfg.replace(relaxation=1.9))

            np.testing.assert_allclose(relaxed.data, plain.data, atol=1e-8)

    def test_relaxation_needs_fewer_sweeps(self):
        rng = np.random.default_rng(2024)
        sweeps = {1.0: 0, 1.9: 0}
        converged = {1.0: 0, 1.9: 0}
        for _ in range(20):
            s, k_prime = _random_instance(rng)
            for relaxation in sweeps:
                cfg = SolverConfig(
                    epsilon=0.05, k_prime=k_prime, max_iters=3000, relaxation=relaxation
                )
                _, _, report = multi_sinkhorn(s, cfg)
                sweeps[relaxation] += report.iterations_used
                converged[relaxation] += report.converged

        assert sweeps[1.9] < sweeps[1.0]
        assert converged[1.9] >= converged[1.0]

    def test_more_rows_than_anchors_is_not_required(self):
        cfg = SolverConfig(k_prime=2, epsilon=0.2, max_iters=5000)

        qp, q, report = multi_sinkhorn(np.random.default_rng(0).random((2, 4)), cfg)

        assert report.converged
        np.testing.assert_allclose(qp.data.sum(axis=1), 0.5, atol=1e-6)
        np.testing.assert_allclose(q.data.sum(axis=1), 2.0, atol=2e-6)

    def test_k_prime_out_of_range(self):
        with pytest.raises(ValueError, match="k_prime"):
            multi_sinkhorn(np.ones((2, 2)), SolverConfig(k_prime=3))


@pytest.mark.slow
class TestAcceptanceSuites:
    """Full-size random suites; run with ``-m slow``."""

    def test_constraint_suite(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            s, k_prime = _random_instance(rng)
            cfg = SolverConfig(epsilon=0.05, k_prime=k_prime, max_iters=1000)

            qp, _, report = multi_sinkhorn(s, cfg)

            assert report.converged
            _check_multi_constraints(qp.data, 1e-6)

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(2025)
        hits = 0
        for _ in range(50):
            s = rng.random((int(rng.choice([4, 6])), 4))
            _, q, _ = multi_sinkhorn(s, SolverConfig(epsilon=0.005, k_prime=2))
            hits += assignment_objective(q, s) >= 0.98 * solve_exact(s, 2).objective

        assert hits >= 48
