import numpy as np
import pytest

from rtchmc.errors import (
    ConfigError,
    DimensionMismatchError,
    OffManifoldError,
    SingularConstraintError,
)
from rtchmc.manifolds import (
    EuclideanBlock,
    ProductManifold,
    Sphere,
    Stiefel,
    check_on_manifold,
    constraints,
    is_on_manifold,
    jacobian,
    parse_manifold,
    project_tangent,
    sample_tangent_gaussian,
    tangent_projector,
)


def finite_difference_jacobian(M, x, step=1e-5):
    J = np.zeros((M.constraint_dim, M.ambient_dim))
    for j in range(M.ambient_dim):
        e = np.zeros(M.ambient_dim)
        e[j] = step
        J[:, j] = (M.constraints(x + e) - M.constraints(x - e)) / (2 * step)
    return J


class TestConstraints:
    """Test constraint residuals."""

    def test_sphere_on_manifold(self, sphere2):
        """Test residual vanishes at a unit vector."""
        np.testing.assert_array_equal(constraints(sphere2, np.array([1.0, 0, 0])), [0])

    def test_sphere_off_manifold(self, sphere2):
        """Test residual at (2, 0, 0) is 2^2 - 1."""
        np.testing.assert_array_equal(constraints(sphere2, np.array([2.0, 0, 0])), [3])

    def test_stiefel_identity_columns(self):
        """Test V_{3,2} residual at the first two columns of I_3."""
        M = Stiefel(3, 2)
        residual = constraints(M, M.flatten(np.eye(3)[:, :2]))
        assert residual.shape == (3,)
        np.testing.assert_array_equal(residual, np.zeros(3))

    def test_stiefel_constraint_count(self):
        """Test the residual has p(p+1)/2 entries."""
        M = Stiefel(7, 4)
        assert M.constraint_dim == 10
        assert constraints(M, M.default_point()).shape == (10,)

    def test_dimension_mismatch(self, sphere2):
        """Test wrong-length input raises."""
        with pytest.raises(DimensionMismatchError):
            constraints(sphere2, np.zeros(4))


class TestJacobian:
    """Test constraint Jacobians."""

    def test_sphere_rows(self, sphere2):
        """Test the sphere Jacobian is 2x."""
        np.testing.assert_allclose(jacobian(sphere2, np.array([1.0, 0, 0])), [[2, 0, 0]])
        np.testing.assert_allclose(
            jacobian(sphere2, np.array([0.6, 0.8, 0.0])), [[1.2, 1.6, 0.0]]
        )

    @pytest.mark.parametrize("d,p", [(3, 2), (4, 2), (5, 3)])
    def test_stiefel_matches_finite_differences(self, d, p, rng):
        """Test Stiefel Jacobian against central differences at near-feasible X."""
        M = Stiefel(d, p)
        for _ in range(20):
            x = M.random_point(rng) + 1e-3 * rng.standard_normal(M.ambient_dim)
            np.testing.assert_allclose(
                jacobian(M, x), finite_difference_jacobian(M, x), atol=1e-6
            )

    def test_full_row_rank(self, stiefel62, rng):
        """Test the Jacobian has full row rank at feasible points."""
        for _ in range(20):
            J = jacobian(stiefel62, stiefel62.random_point(rng))
            assert np.linalg.svd(J, compute_uv=False).min() > 1e-10

    def test_components_match_full_evaluation(self, stiefel62, rng):
        """Test the per-constraint accessors agree with the full vectors."""
        x = stiefel62.random_point(rng) + 0.01 * rng.standard_normal(12)
        c = stiefel62.constraints(x)
        J = stiefel62.jacobian(x)
        for i in range(stiefel62.constraint_dim):
            assert stiefel62.constraint_component(i, x) == pytest.approx(c[i])
            np.testing.assert_allclose(stiefel62.jacobian_row(i, x), J[i])


class TestTangentProjector:
    """Test the tangent-space projector."""

    def test_sphere_north_pole(self, sphere2):
        """Test P = diag(0, 1, 1) at (1, 0, 0)."""
        P = tangent_projector(sphere2, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(P, np.diag([0.0, 1.0, 1.0]), atol=1e-15)

    @pytest.mark.parametrize(
        "manifold", [Sphere(5), Stiefel(6, 2), Stiefel(4, 2)], ids=lambda m: m.spec
    )
    def test_projector_identities(self, manifold, rng):
        """Test P^2 = P, P^T P = P and C P = 0 at random feasible points."""
        for _ in range(100):
            x = manifold.random_point(rng)
            P = tangent_projector(manifold, x)
            C = jacobian(manifold, x)
            assert np.max(np.abs(P @ P - P)) <= 1e-10
            assert np.max(np.abs(P.T @ P - P)) <= 1e-10
            assert np.max(np.abs(C @ P)) <= 1e-10

    def test_project_matches_dense_projector(self, stiefel62, rng):
        """Test the matrix-free projection equals P v."""
        x = stiefel62.random_point(rng)
        v = rng.standard_normal(12)
        np.testing.assert_allclose(
            project_tangent(stiefel62, x, v),
            tangent_projector(stiefel62, x) @ v,
            atol=1e-12,
        )

    def test_rank_deficient_jacobian(self):
        """Test repeated Stiefel columns make the Gram matrix singular."""
        M = Stiefel(3, 2)
        x = M.flatten(np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(SingularConstraintError):
            tangent_projector(M, x)


class TestSampleTangentGaussian:
    """Test tangent Gaussian draws."""

    def test_removes_radial_component(self, sphere2):
        """Test v' = (1, 2, 3) at (1, 0, 0) maps to (0, 2, 3)."""

        class FixedDraw:
            def standard_normal(self, n):
                return np.array([1.0, 2.0, 3.0])

        v = sample_tangent_gaussian(sphere2, np.array([1.0, 0.0, 0.0]), FixedDraw())
        np.testing.assert_allclose(v, [0.0, 2.0, 3.0])

    def test_draws_are_tangent(self, stiefel62, rng):
        """Test C(x) v vanishes for 1000 draws."""
        x = stiefel62.random_point(rng)
        C = jacobian(stiefel62, x)
        for _ in range(1000):
            v = sample_tangent_gaussian(stiefel62, x, rng)
            assert np.max(np.abs(C @ v)) <= 1e-10

    def test_covariance_is_projector(self, sphere2, rng):
        """Test the empirical covariance at (0, 0, 1) is diag(1, 1, 0)."""
        x = np.array([0.0, 0.0, 1.0])
        draws = np.array(
            [sample_tangent_gaussian(sphere2, x, rng) for _ in range(100_000)]
        )
        cov = draws.T @ draws / draws.shape[0]
        np.testing.assert_allclose(cov, np.diag([1.0, 1.0, 0.0]), atol=0.02)


class TestFeasibility:
    """Test on-manifold checks."""

    def test_is_on_manifold(self, sphere2):
        assert is_on_manifold(sphere2, np.array([0.0, 1.0, 0.0]))
        assert not is_on_manifold(sphere2, np.array([0.0, 1.1, 0.0]))
        assert not is_on_manifold(sphere2, np.array([np.nan, 1.0, 0.0]))

    def test_check_raises_off_manifold(self, sphere2):
        with pytest.raises(OffManifoldError, match="violates constraints"):
            check_on_manifold(sphere2, np.array([2.0, 0.0, 0.0]))

    def test_tolerance_is_configurable(self, sphere2):
        x = np.array([1.0 + 1e-7, 0.0, 0.0])
        assert not is_on_manifold(sphere2, x)
        assert is_on_manifold(sphere2, x, tol=1e-6)


class TestProductManifold:
    """Test products of constrained factors and Euclidean blocks."""

    def setup_method(self):
        self.M = ProductManifold(
            [Stiefel(4, 2), EuclideanBlock(2, nonneg=True), EuclideanBlock(4, nonneg=True)]
        )

    def test_dimensions(self):
        assert self.M.ambient_dim == 14
        assert self.M.constraint_dim == 3

    def test_constraints_concatenate(self, rng):
        """Test Euclidean blocks contribute no constraints."""
        x = self.M.random_point(rng)
        x[:8] *= 1.1
        np.testing.assert_allclose(
            self.M.constraints(x), self.M.factors[0].constraints(x[:8])
        )

    def test_nonneg_ranges_are_offset(self):
        assert self.M.nonneg_ranges() == [(8, 10), (10, 14)]

    def test_projection_leaves_euclidean_blocks(self, rng):
        x = self.M.random_point(rng)
        v = rng.standard_normal(14)
        w = self.M.project(x, v)
        np.testing.assert_array_equal(w[8:], v[8:])
        assert np.max(np.abs(self.M.jacobian(x) @ w)) <= 1e-10

    def test_jacobian_matches_finite_differences(self, rng):
        x = self.M.random_point(rng)
        np.testing.assert_allclose(
            self.M.jacobian(x), finite_difference_jacobian(self.M, x), atol=1e-6
        )


class TestParseManifold:
    """Test manifold config strings."""

    def test_sphere(self):
        M = parse_manifold("sphere:3")
        assert isinstance(M, Sphere)
        assert M.ambient_dim == 4

    def test_stiefel(self):
        M = parse_manifold("stiefel:18,3")
        assert isinstance(M, Stiefel)
        assert (M.d, M.p, M.ambient_dim) == (18, 3, 54)

    def test_product(self):
        M = parse_manifold("product:[stiefel:30,5;euclid+:5;euclid+:30]")
        assert isinstance(M, ProductManifold)
        assert M.ambient_dim == 30 * 5 + 5 + 30
        assert M.spec == "product:[stiefel:30,5;euclid+:5;euclid+:30]"

    @pytest.mark.parametrize(
        "spec", ["sphere", "sphere:x", "stiefel:3", "stiefel:2,3", "torus:2", "product:1"]
    )
    def test_invalid(self, spec):
        with pytest.raises(ConfigError):
            parse_manifold(spec)
