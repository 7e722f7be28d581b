import numpy as np
import pytest
import scipy.sparse as sparse

from cora.assembly import (
    assemble_constraints,
    assemble_data_matrix,
    evaluate_lifted_cost,
)
from cora.certify import (
    adjoint_constraint_jacobian,
    build_certificate,
    certify_solution,
    check_psd,
    compute_multipliers,
    min_eigenpair,
    saddle_direction,
)
from cora.manifold import LiftedManifold
from cora.problem import (
    Problem,
    RangeMeasurement,
    build_ordering,
    random_feasible_state,
)

from conftest import ground_truth_state, make_square_fixture, random_problem


def dense_multipliers(Q, constraints, X):
    """Least-squares oracle on the explicit adjoint constraint Jacobian."""
    J = adjoint_constraint_jacobian(constraints, X).toarray()
    rhs = -(Q @ X).reshape(-1)
    lam, *_ = np.linalg.lstsq(J, rhs, rcond=None)
    residual = float(np.linalg.norm(J @ lam + (Q @ X).reshape(-1)))
    return lam, residual


class TestAdjointJacobian:
    def test_single_sphere_column(self):
        problem = Problem(
            dimension=2,
            pose_ids=(),
            landmark_ids=("LA", "LB"),
            range_measurements=(
                RangeMeasurement(from_id="LA", to_id="LB", distance=1.0, sigma=1.0),
            ),
        )
        ordering = build_ordering(problem)
        constraints = assemble_constraints(problem, ordering)
        X = random_feasible_state(problem, p=2, seed=0)
        J = adjoint_constraint_jacobian(constraints, X).toarray()
        assert J.shape == (ordering.num_rows * 2, 1)
        # the only nonzero entries are the unit row itself
        expected = np.zeros_like(J)
        r = ordering.range_row(0)
        expected[2 * r : 2 * r + 2, 0] = X[r]
        assert np.array_equal(J, expected)
        assert np.linalg.norm(J[:, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_identity_block_columns_orthogonal(self):
        problem = random_problem(
            dimension=2, num_poses=1, num_landmarks=0, num_ranges=0,
            num_extra_edges=0, seed=0,
        )
        ordering = build_ordering(problem)
        constraints = assemble_constraints(problem, ordering)
        X = np.zeros((ordering.num_rows, 2))
        X[0:2] = np.eye(2)
        J = adjoint_constraint_jacobian(constraints, X).toarray()
        gram = J.T @ J
        assert np.allclose(gram, np.diag(np.diag(gram)), atol=1e-14)

    def test_full_column_rank_at_random_feasible_points(self):
        count = 0
        for seed in range(50):
            problem = random_problem(
                dimension=2 + seed % 2,
                num_poses=2 + seed % 9,
                num_landmarks=seed % 3,
                num_ranges=seed % 5,
                seed=seed,
            )
            ordering = build_ordering(problem)
            constraints = assemble_constraints(problem, ordering)
            p = problem.dimension + seed % 3
            X = random_feasible_state(problem, p=p, seed=seed)
            J = adjoint_constraint_jacobian(constraints, X).toarray()
            sv = np.linalg.svd(J, compute_uv=False)
            assert sv[-1] > 1e-8 * sv[0]
            count += 1
        assert count == 50


class TestMultipliers:
    def test_zero_at_zero_noise_ground_truth(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = ground_truth_state(problem, truth, p=3)
        mult = compute_multipliers(Q.matrix, constraints, X)
        assert np.max(np.abs(mult.values)) <= 1e-10
        assert mult.residual <= 1e-10

    def test_range_fixture_optimum(self):
        problem = Problem(
            dimension=2,
            pose_ids=(),
            landmark_ids=("LA", "LB"),
            range_measurements=(
                RangeMeasurement(from_id="LA", to_id="LB", distance=1.0, sigma=1.0),
            ),
        )
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = np.zeros((3, 2))
        X[ordering.range_row(0)] = [1.0, 0.0]
        X[ordering.translation_row("LA")] = [0.0, 0.0]
        X[ordering.translation_row("LB")] = [1.0, 0.0]
        mult = compute_multipliers(Q.matrix, constraints, X)
        assert np.allclose(mult.values, 0.0, atol=1e-14)
        S = build_certificate(Q.matrix, constraints, mult.values)
        assert np.array_equal(S.toarray(), Q.matrix.toarray())
        assert check_psd(S, beta=1e-6)

    def test_blockwise_equals_dense_least_squares(self):
        for seed in range(8):
            problem = random_problem(dimension=2 + seed % 2, seed=seed)
            ordering = build_ordering(problem)
            Q = assemble_data_matrix(problem, ordering)
            constraints = assemble_constraints(problem, ordering)
            X = random_feasible_state(problem, p=problem.dimension + 1, seed=seed)
            mult = compute_multipliers(Q.matrix, constraints, X)
            lam_dense, resid_dense = dense_multipliers(Q.matrix, constraints, X)
            scale = 1.0 + np.max(np.abs(lam_dense))
            assert np.max(np.abs(mult.values - lam_dense)) <= 1e-10 * scale
            assert mult.residual == pytest.approx(resid_dense, rel=1e-8, abs=1e-10)


class TestCertificateMatrix:
    def test_zero_multipliers_return_data_matrix(self, square_problem):
        Q = assemble_data_matrix(square_problem)
        constraints = assemble_constraints(square_problem)
        S = build_certificate(Q.matrix, constraints, np.zeros(len(constraints)))
        assert np.array_equal(S.toarray(), Q.matrix.toarray())

    def test_sphere_multiplier_shifts_diagonal(self):
        problem = Problem(
            dimension=2,
            pose_ids=(),
            landmark_ids=("LA", "LB"),
            range_measurements=(
                RangeMeasurement(from_id="LA", to_id="LB", distance=1.0, sigma=1.0),
            ),
        )
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        S = build_certificate(Q.matrix, constraints, np.array([-2.0]))
        r = ordering.range_row(0)
        diff = S.toarray() - Q.matrix.toarray()
        expected = np.zeros_like(diff)
        expected[r, r] = -2.0
        assert np.array_equal(diff, expected)

    def test_certificate_annihilates_stationary_points(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = ground_truth_state(problem, truth, p=3)
        mult = compute_multipliers(Q.matrix, constraints, X)
        S = build_certificate(Q.matrix, constraints, mult.values)
        assert np.linalg.norm(S @ X) <= mult.residual + 1e-10

    def test_wrong_multiplier_count_rejected(self, square_problem):
        Q = assemble_data_matrix(square_problem)
        constraints = assemble_constraints(square_problem)
        with pytest.raises(ValueError):
            build_certificate(Q.matrix, constraints, np.zeros(3))


class TestCheckPsd:
    def test_identity(self):
        assert check_psd(sparse.identity(4, format="csc"), beta=1e-6)

    def test_clearly_indefinite(self):
        S = sparse.diags([1.0, -1e-3]).tocsc()
        assert not check_psd(S, beta=1e-6)

    def test_beta_absorbs_roundoff_negativity(self):
        S = sparse.diags([1.0, -1e-9]).tocsc()
        assert check_psd(S, beta=1e-6)

    def test_requires_positive_beta(self):
        with pytest.raises(ValueError):
            check_psd(sparse.identity(2, format="csc"), beta=0.0)


class TestMinEigenpair:
    def test_small_diagonal(self):
        S = sparse.diags([3.0, 1.0, -2.0]).tocsc()
        result = min_eigenpair(S)
        assert result.value == pytest.approx(-2.0, abs=1e-12)
        assert abs(result.vector[2]) == pytest.approx(1.0, abs=1e-12)
        assert result.converged

    def test_matches_dense_oracle_random(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((50, 50))
        S = sparse.csc_matrix(A + A.T)
        result = min_eigenpair(S)
        w = np.linalg.eigvalsh(S.toarray())
        assert result.value == pytest.approx(w[0], rel=1e-8, abs=1e-8)

    def test_lanczos_path_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        k = 700  # above the dense cutoff, exercises the shifted Lanczos path
        M = sparse.random(k, k, density=0.01, random_state=2)
        S = (M + M.T).tocsc()
        result = min_eigenpair(S, tol=1e-10)
        w = np.linalg.eigvalsh(S.toarray())
        assert result.converged
        assert result.value == pytest.approx(w[0], rel=1e-8, abs=1e-8)
        assert result.residual <= 1e-8 * max(1.0, abs(w).max())

    def test_psd_matrix_reports_nonnegative(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((40, 8))
        S = sparse.csc_matrix(A @ A.T)
        result = min_eigenpair(S, tol=1e-8)
        norm = float(abs(S).max())
        assert result.value >= -1e-8 * norm


class TestSaddleDirection:
    def _uncertified_candidate(self):
        # plant: optimize the square fixture with noisy ranges at rank 2 from a
        # bad start until stationary, then find a negative certificate direction
        problem, truth = make_square_fixture(sigma=0.3)
        noisy = []
        for m in problem.range_measurements:
            noisy.append(
                RangeMeasurement(
                    from_id=m.from_id,
                    to_id=m.to_id,
                    distance=m.distance * 2.5,
                    sigma=m.sigma,
                )
            )
        problem = Problem(
            dimension=2,
            pose_ids=problem.pose_ids,
            landmark_ids=problem.landmark_ids,
            rel_pose_measurements=problem.rel_pose_measurements,
            range_measurements=tuple(noisy),
        )
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)

        from cora.rtr import RtrOptions, build_preconditioner, solve_rtr
        from cora.staircase import _objective_callbacks

        manifold = LiftedManifold(ordering, 2)
        best = None
        for seed in range(30):
            X0 = random_feasible_state(problem, p=2, seed=seed)
            precon = build_preconditioner("block-cholesky", Q, problem, ordering)
            options = RtrOptions(grad_norm_scale=1.0 + Q.norm_inf())
            X, _ = solve_rtr(_objective_callbacks(Q, manifold, precon), X0, options)
            mult = compute_multipliers(Q.matrix, constraints, X)
            S = build_certificate(Q.matrix, constraints, mult.values)
            eig = min_eigenpair(S)
            if eig.value < -1e-6:
                return problem, ordering, Q, S, X, eig
        raise AssertionError("no uncertified stationary point found")

    def test_direction_is_tangent_and_curvature_matches(self):
        problem, ordering, Q, S, X, eig = self._uncertified_candidate()
        direction = saddle_direction(S, X, eig.vector)
        X_plus = np.hstack([X, np.zeros((X.shape[0], 1))])
        manifold = LiftedManifold(ordering, X.shape[1] + 1)
        assert manifold.tangent_error(X_plus, direction) == 0.0

        # finite-difference second derivative along the retracted curve
        f0 = evaluate_lifted_cost(Q, X_plus)
        t = 1e-4
        f_plus = evaluate_lifted_cost(Q, manifold.retract(X_plus, t * direction))
        f_minus = evaluate_lifted_cost(Q, manifold.retract(X_plus, -t * direction))
        second = (f_plus - 2.0 * f0 + f_minus) / (t * t)
        expected = 2.0 * float(eig.vector @ (S @ eig.vector))
        assert second == pytest.approx(expected, rel=1e-4, abs=1e-8)
        assert expected < 0.0

    def test_descent_exists_along_direction(self):
        problem, ordering, Q, S, X, eig = self._uncertified_candidate()
        direction = saddle_direction(S, X, eig.vector)
        X_plus = np.hstack([X, np.zeros((X.shape[0], 1))])
        manifold = LiftedManifold(ordering, X.shape[1] + 1)
        f0 = evaluate_lifted_cost(Q, X_plus)
        t = 1.0
        found = False
        for _ in range(31):
            if evaluate_lifted_cost(Q, manifold.retract(X_plus, t * direction)) < f0:
                found = True
                break
            t *= 0.5
        assert found

    def test_rejects_nonnegative_curvature(self, square_problem):
        Q = assemble_data_matrix(square_problem)
        constraints = assemble_constraints(square_problem)
        S = build_certificate(Q.matrix, constraints, np.zeros(len(constraints)))
        X = random_feasible_state(square_problem, p=3, seed=0)
        v = np.ones(S.shape[0]) / np.sqrt(S.shape[0])
        with pytest.raises(ValueError):
            saddle_direction(S, X, v)


class TestCertifySolution:
    def test_certifies_zero_noise_ground_truth(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = ground_truth_state(problem, truth, p=2)
        result = certify_solution(Q.matrix, constraints, X)
        assert result.certified
        assert result.status == "certified"
        assert result.multipliers.residual <= 1e-10

    def test_lower_bound_property_of_certified_value(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = ground_truth_state(problem, truth, p=2)
        result = certify_solution(Q.matrix, constraints, X)
        assert result.certified
        f_certified = evaluate_lifted_cost(Q, X)
        for seed in range(200):
            Y = random_feasible_state(problem, p=2, seed=seed)
            assert f_certified <= evaluate_lifted_cost(Q, Y) + 1e-9

    def test_certification_invariant_under_zero_lift(self, square):
        problem, truth = square
        ordering = build_ordering(problem)
        Q = assemble_data_matrix(problem, ordering)
        constraints = assemble_constraints(problem, ordering)
        X = ground_truth_state(problem, truth, p=2)
        lifted = np.hstack([X, np.zeros((X.shape[0], 1))])
        r1 = certify_solution(Q.matrix, constraints, X)
        r2 = certify_solution(Q.matrix, constraints, lifted)
        assert r1.certified and r2.certified
        assert np.allclose(r1.multipliers.values, r2.multipliers.values, atol=1e-12)
