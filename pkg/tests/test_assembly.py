import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cora.assembly import (
    RankDSolution,
    assemble_constraints,
    assemble_data_matrix,
    euclidean_gradient,
    evaluate_lifted_cost,
    evaluate_map_cost,
    evaluate_qcqp_cost_direct,
    write_matrix_market,
)
from cora.problem import (
    Problem,
    RangeMeasurement,
    RelativePoseMeasurement,
    build_ordering,
    random_feasible_state,
)

from conftest import ground_truth_state, make_square_fixture, random_problem


def single_range_problem(distance=1.0, sigma=1.0):
    """One range edge between two landmarks: rows are (r, t_from, t_to)."""
    return Problem(
        dimension=2,
        pose_ids=(),
        landmark_ids=("LA", "LB"),
        range_measurements=(
            RangeMeasurement(from_id="LA", to_id="LB", distance=distance, sigma=sigma),
        ),
    )


class TestDataMatrix:
    def test_single_range_edge_outer_product(self):
        problem = single_range_problem()
        Q = assemble_data_matrix(problem).matrix.toarray()
        v = np.array([1.0, 1.0, -1.0])
        assert np.array_equal(Q, np.outer(v, v))

    def test_translation_only_edge_is_laplacian(self):
        tau = 3.5
        problem = Problem(
            dimension=2,
            pose_ids=("A0", "A1"),
            rel_pose_measurements=(
                RelativePoseMeasurement(
                    from_id="A0",
                    to_id="A1",
                    rotation=np.eye(2),
                    translation=np.zeros(2),
                    kappa=0.0,
                    tau=tau,
                ),
            ),
        )
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering).matrix.toarray()
        t0, t1 = ordering.translation_row("A0"), ordering.translation_row("A1")
        assert Q[t0, t0] == tau and Q[t1, t1] == tau
        assert Q[t0, t1] == -tau and Q[t1, t0] == -tau
        # kappa = 0 contributes no rotational terms at all
        assert np.all(Q[ordering.rotation_block, :] == 0.0)

    def test_zero_noise_square_ground_truth_cost(self, square):
        problem, truth = square
        Q = assemble_data_matrix(problem)
        X = ground_truth_state(problem, truth)
        assert evaluate_lifted_cost(Q, X) <= 1e-12 * (1.0 + Q.norm_inf())

    def test_symmetric_exactly(self):
        problem = random_problem(seed=11)
        Q = assemble_data_matrix(problem).matrix
        assert (Q != Q.T).nnz == 0

    def test_psd_with_relative_shift(self):
        for seed in range(5):
            problem = random_problem(dimension=2 + seed % 2, seed=seed)
            Q = assemble_data_matrix(problem)
            dense = Q.matrix.toarray()
            shift = 1e-9 * Q.norm_inf()
            scipy.linalg.cholesky(dense + shift * np.eye(dense.shape[0]))

    def test_range_block_is_weighted_squared_distances(self):
        problem = random_problem(seed=2, num_ranges=7)
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering).matrix
        block = Q[ordering.range_block, ordering.range_block].toarray()
        expected = np.diag(
            [m.weight * (m.distance * m.distance) for m in problem.range_measurements]
        )
        assert np.array_equal(block, expected)

    def test_matrix_market_export(self, tmp_path, square_problem):
        import scipy.io

        Q = assemble_data_matrix(square_problem)
        path = tmp_path / "q.mtx"
        write_matrix_market(Q, str(path))
        back = scipy.io.mmread(str(path))
        assert np.allclose(back.toarray(), Q.matrix.toarray())


class TestCostEquivalence:
    @pytest.mark.parametrize("dimension", [2, 3])
    def test_random_problems_and_states(self, dimension):
        rng = np.random.default_rng(dimension)
        for trial in range(20):
            problem = random_problem(
                dimension=dimension,
                num_poses=int(rng.integers(1, 8)),
                num_landmarks=int(rng.integers(0, 3)),
                num_ranges=int(rng.integers(0, 6)),
                seed=100 * dimension + trial,
            )
            ordering = build_ordering(problem)
            Q = assemble_data_matrix(problem, ordering)
            p = int(rng.integers(dimension, dimension + 3))
            # infeasible states must agree too: use a raw Gaussian matrix
            X = rng.standard_normal((ordering.num_rows, p))
            lifted = evaluate_lifted_cost(Q, X)
            direct = evaluate_qcqp_cost_direct(problem, ordering, X)
            assert abs(lifted - direct) <= 1e-9 * (1.0 + abs(direct))

    def test_zero_state(self, square_problem):
        ordering = build_ordering(square_problem)
        Q = assemble_data_matrix(square_problem, ordering)
        X = np.zeros((ordering.num_rows, 2))
        assert evaluate_lifted_cost(Q, X) == 0.0
        assert evaluate_qcqp_cost_direct(square_problem, ordering, X) == 0.0

    def test_range_fixture_orthogonal_direction(self):
        problem = single_range_problem()
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        X = np.zeros((3, 2))
        X[0] = [0.0, 1.0]  # r
        X[1] = [0.0, 0.0]  # t_from
        X[2] = [1.0, 0.0]  # t_to
        assert evaluate_lifted_cost(Q, X) == pytest.approx(2.0, abs=1e-14)
        assert evaluate_qcqp_cost_direct(problem, ordering, X) == pytest.approx(
            2.0, abs=1e-14
        )

    def test_rotation_only_problem(self):
        problem = random_problem(
            seed=8, num_landmarks=0, num_ranges=0, translation_only_fraction=0.0
        )
        ordering = build_ordering(problem)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((ordering.num_rows, 2))
        expected = 0.0
        for m in problem.rel_pose_measurements:
            B_from = X[ordering.rotation_rows(m.from_id)]
            B_to = X[ordering.rotation_rows(m.to_id)]
            expected += m.kappa * np.sum((B_to - m.rotation.T @ B_from) ** 2)
            t_from = X[ordering.translation_row(m.from_id)]
            t_to = X[ordering.translation_row(m.to_id)]
            expected += m.tau * np.sum((t_to - t_from - m.translation @ B_from) ** 2)
        assert evaluate_qcqp_cost_direct(problem, ordering, X) == pytest.approx(expected)

    def test_mismatched_rows_rejected(self, square_problem):
        ordering = build_ordering(square_problem)
        Q = assemble_data_matrix(square_problem, ordering)
        with pytest.raises(ValueError):
            evaluate_lifted_cost(Q, np.zeros((ordering.num_rows + 1, 2)))
        with pytest.raises(ValueError):
            evaluate_qcqp_cost_direct(
                square_problem, ordering, np.zeros((ordering.num_rows - 1, 2))
            )


class TestMapCost:
    def _one_range_solution(self, delta, distance, sigma=1.0):
        problem = Problem(
            dimension=2,
            pose_ids=(),
            landmark_ids=("LA", "LB"),
            range_measurements=(
                RangeMeasurement(from_id="LA", to_id="LB", distance=distance, sigma=sigma),
            ),
        )
        sol = RankDSolution(
            rotations=np.zeros((0, 2, 2)),
            translations=np.zeros((0, 2)),
            landmarks=np.array([[0.0, 0.0], delta]),
        )
        return problem, sol

    def test_consistent_triangle(self):
        problem, sol = self._one_range_solution(np.array([3.0, 4.0]), 5.0)
        assert evaluate_map_cost(problem, sol) == pytest.approx(0.0, abs=1e-14)

    def test_one_meter_error(self):
        problem, sol = self._one_range_solution(np.array([3.0, 4.0]), 4.0)
        assert evaluate_map_cost(problem, sol) == pytest.approx(1.0)

    def test_equals_direct_cost_at_optimal_unit_rows(self):
        from cora.staircase import state_from_solution

        for seed in range(10):
            problem = random_problem(seed=seed, num_ranges=6)
            ordering = build_ordering(problem)
            rng = np.random.default_rng(seed)
            d = problem.dimension
            rotations = []
            for _ in range(problem.num_poses):
                q, r = np.linalg.qr(rng.standard_normal((d, d)))
                q = q * np.sign(np.diag(r))
                if np.linalg.det(q) < 0:
                    q[:, -1] *= -1
                rotations.append(q)
            sol = RankDSolution(
                rotations=np.array(rotations),
                translations=rng.standard_normal((problem.num_poses, d)),
                landmarks=rng.standard_normal((problem.num_landmarks, d)),
            )
            X = state_from_solution(problem, ordering, sol)
            map_cost = evaluate_map_cost(problem, sol)
            direct = evaluate_qcqp_cost_direct(problem, ordering, X)
            assert abs(map_cost - direct) <= 1e-9 * (1.0 + abs(direct))

    def test_rejects_non_rotation(self):
        problem, sol = self._one_range_solution(np.array([3.0, 4.0]), 5.0)
        problem = Problem(
            dimension=2,
            pose_ids=("A0",),
            landmark_ids=problem.landmark_ids,
            range_measurements=problem.range_measurements,
        )
        bad = RankDSolution(
            rotations=np.array([[[1.0, 0.0], [0.4, 1.0]]]),
            translations=np.zeros((1, 2)),
            landmarks=sol.landmarks,
        )
        with pytest.raises(ValueError):
            evaluate_map_cost(problem, bad)


class TestEuclideanGradient:
    def test_zero_state(self, square_problem):
        ordering = build_ordering(square_problem)
        Q = assemble_data_matrix(square_problem, ordering)
        X = np.zeros((ordering.num_rows, 3))
        assert np.all(euclidean_gradient(Q, X) == 0.0)

    def test_matches_finite_differences(self):
        problem = random_problem(seed=21)
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        rng = np.random.default_rng(3)
        X = rng.standard_normal((ordering.num_rows, 3))
        G = euclidean_gradient(Q, X)
        t = 1e-5
        for _ in range(5):
            E = rng.standard_normal(X.shape)
            fd = (
                evaluate_lifted_cost(Q, X + t * E) - evaluate_lifted_cost(Q, X - t * E)
            ) / (2.0 * t)
            analytic = float(np.sum(G * E))
            assert abs(fd - analytic) <= 1e-6 * (1.0 + abs(analytic))

    def test_zero_at_zero_noise_ground_truth(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        X = ground_truth_state(problem, truth)
        assert np.linalg.norm(euclidean_gradient(Q, X)) <= 1e-9 * (1.0 + Q.norm_inf())


class TestConstraints:
    def test_count_formula(self):
        problem = random_problem(dimension=3, num_poses=2, num_ranges=3, seed=1)
        constraints = assemble_constraints(problem)
        assert len(constraints) == 2 * 6 + 3

    def test_planar_orthonormality_triplet(self):
        problem = random_problem(dimension=2, num_poses=1, num_landmarks=0, num_ranges=0, num_extra_edges=0, seed=0)
        constraints = assemble_constraints(problem)
        assert len(constraints) == 3
        expected = [
            (np.array([[1.0, 0.0], [0.0, 0.0]]), 1.0),
            (np.array([[0.0, 0.5], [0.5, 0.0]]), 0.0),
            (np.array([[0.0, 0.0], [0.0, 1.0]]), 1.0),
        ]
        for i, (block, b) in enumerate(expected):
            A = constraints.matrix(i).toarray()
            assert np.array_equal(A[:2, :2], block)
            assert constraints.b[i] == b

    def test_range_unit_norm_constraint(self):
        problem = single_range_problem()
        ordering = build_ordering(problem)
        constraints = assemble_constraints(problem, ordering)
        A = constraints.matrix(0).toarray()
        expected = np.zeros((3, 3))
        expected[ordering.range_row(0), ordering.range_row(0)] = 1.0
        assert np.array_equal(A, expected)
        assert constraints.b[0] == 1.0

    def test_block_diagonal_support(self):
        problem = random_problem(seed=4)
        ordering = build_ordering(problem)
        constraints = assemble_constraints(problem, ordering)
        d = problem.dimension
        n_rot_constraints = problem.num_poses * d * (d + 1) // 2
        per_pose = d * (d + 1) // 2
        for i in range(len(constraints)):
            sl = slice(constraints.offsets[i], constraints.offsets[i + 1])
            rows, cols = constraints.rows[sl], constraints.cols[sl]
            if i < n_rot_constraints:
                block = ordering.rotation_rows(problem.pose_ids[i // per_pose])
                assert np.all((rows >= block.start) & (rows < block.stop))
                assert np.all((cols >= block.start) & (cols < block.stop))
            else:
                e = i - n_rot_constraints
                assert np.all(rows == ordering.range_row(e))
                assert np.all(cols == ordering.range_row(e))

    def test_feasible_states_satisfy_constraints(self):
        for seed in range(5):
            problem = random_problem(dimension=2 + seed % 2, seed=seed)
            ordering = build_ordering(problem)
            constraints = assemble_constraints(problem, ordering)
            X = random_feasible_state(problem, p=problem.dimension + 1, seed=seed)
            for i in range(len(constraints)):
                assert constraints.evaluate(i, X) == pytest.approx(
                    constraints.b[i], abs=1e-12
                )


class TestRangeTermLemma:
    @given(
        delta=hnp.arrays(
            np.float64,
            (2,),
            elements=st.floats(-10, 10, allow_nan=False),
        ).filter(lambda v: np.linalg.norm(v) > 1e-3),
        distance=st.floats(0.01, 20.0),
        angle=st.floats(0, 2 * np.pi),
    )
    @settings(max_examples=100, deadline=None)
    def test_minimum_over_unit_direction(self, delta, distance, angle):
        # closed form: min_r |delta - distance * r|^2 = (|delta| - distance)^2
        r_opt = delta / np.linalg.norm(delta)
        best = np.sum((delta - distance * r_opt) ** 2)
        assert best == pytest.approx((np.linalg.norm(delta) - distance) ** 2, rel=1e-9)
        r = np.array([np.cos(angle), np.sin(angle)])
        assert np.sum((delta - distance * r) ** 2) >= best - 1e-9
