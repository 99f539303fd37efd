import numpy as np
import pytest

from prefrl.errors import NumericalError
from prefrl.linalg import (
    PsdMatrix,
    mahalanobis,
    rank_one_update,
    ridge_solve,
    sample_correlated_gaussian,
)


def random_spd(rng, d: int) -> np.ndarray:
    A = rng.normal(size=(d, d))
    return A @ A.T + np.eye(d)


class TestPsdMatrix:
    def test_factor_reconstructs(self, rng):
        A = random_spd(rng, 4)
        M = PsdMatrix.from_matrix(A)
        np.testing.assert_allclose(M.chol @ M.chol.T, A, rtol=1e-12)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            PsdMatrix.from_matrix(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NumericalError):
            PsdMatrix.from_matrix(np.diag([1.0, -1.0]))

    def test_tiny_pivot_refused(self):
        with pytest.raises(NumericalError):
            PsdMatrix.from_matrix(np.diag([1.0, 1e-30]))

    def test_immutable(self):
        M = PsdMatrix.scaled_identity(2)
        with pytest.raises(ValueError):
            M.matrix[0, 0] = 5.0


class TestRankOneUpdate:
    def test_basis_vector(self):
        M = rank_one_update(PsdMatrix.scaled_identity(2), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(M.matrix, np.diag([2.0, 1.0]))

    def test_zero_vector(self):
        M = rank_one_update(PsdMatrix.scaled_identity(3, 0.5), np.zeros(3))
        np.testing.assert_array_equal(M.matrix, 0.5 * np.eye(3))

    def test_sherman_morrison(self, rng):
        A = random_spd(rng, 4)
        x = rng.normal(size=4)
        inv = np.linalg.inv(A)
        expected = inv - np.outer(inv @ x, inv @ x) / (1 + x @ inv @ x)
        got = np.linalg.inv(rank_one_update(PsdMatrix.from_matrix(A), x).matrix)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            rank_one_update(PsdMatrix.scaled_identity(3), np.ones(2))

    def test_long_sequence_consistency(self, rng):
        lam, d = 1.0, 5
        M = PsdMatrix.scaled_identity(d, lam)
        direct = lam * np.eye(d)
        for _ in range(1000):
            x = rng.normal(size=d) * 0.3
            M = rank_one_update(M, x)
            direct += np.outer(x, x)
        err = np.linalg.norm(M.chol @ M.chol.T - direct)
        assert err <= 1e-8 * np.linalg.norm(direct)


class TestMahalanobis:
    def test_identity(self, rng):
        x = rng.normal(size=3)
        M = PsdMatrix.scaled_identity(3)
        assert mahalanobis(x, M, "direct") == pytest.approx(np.linalg.norm(x))
        assert mahalanobis(x, M, "inverse") == pytest.approx(np.linalg.norm(x))

    def test_diagonal(self):
        M = PsdMatrix.from_matrix(np.diag([4.0, 1.0]))
        assert mahalanobis(np.array([1.0, 0.0]), M, "direct") == pytest.approx(2.0)
        assert mahalanobis(np.array([1.0, 0.0]), M, "inverse") == pytest.approx(0.5)

    def test_explicit_inverse(self, rng):
        A = random_spd(rng, 5)
        x = rng.normal(size=5)
        M = PsdMatrix.from_matrix(A)
        assert mahalanobis(x, M) == pytest.approx(np.sqrt(x @ np.linalg.inv(A) @ x), abs=1e-10)
        assert mahalanobis(x, M, "direct") == pytest.approx(np.sqrt(x @ A @ x), abs=1e-10)

    def test_rows(self, rng):
        A = random_spd(rng, 3)
        X = rng.normal(size=(6, 3))
        M = PsdMatrix.from_matrix(A)
        np.testing.assert_allclose(mahalanobis(X, M), [mahalanobis(x, M) for x in X], rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mahalanobis(np.ones(2), PsdMatrix.scaled_identity(3))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            mahalanobis(np.ones(2), PsdMatrix.scaled_identity(2), "other")


class TestRidgeSolve:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(ridge_solve(PsdMatrix.scaled_identity(3), b), b)

    def test_diagonal(self):
        np.testing.assert_allclose(ridge_solve(PsdMatrix.from_matrix(np.diag([2.0, 4.0])), np.array([2.0, 4.0])),
                                   [1.0, 1.0])

    def test_residual(self, rng):
        A = random_spd(rng, 6)
        b = rng.normal(size=6)
        x = ridge_solve(PsdMatrix.from_matrix(A), b)
        assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ridge_solve(PsdMatrix.scaled_identity(3), np.ones(4))


class TestGaussianSampler:
    def draws(self, mean, c, M, n, seed=0):
        rng = np.random.default_rng(seed)
        return np.stack([sample_correlated_gaussian(mean, c, M, rng) for _ in range(n)])

    def test_standard_normal(self):
        X = self.draws(np.zeros(3), 1.0, PsdMatrix.scaled_identity(3), 50_000)
        err = np.linalg.norm(np.cov(X.T) - np.eye(3)) / np.linalg.norm(np.eye(3))
        assert err < 0.05

    def test_diagonal_precision(self):
        X = self.draws(np.zeros(2), 1.0, PsdMatrix.from_matrix(np.diag([4.0, 1.0])), 50_000)
        np.testing.assert_allclose(np.cov(X.T), np.diag([0.25, 1.0]), atol=0.02)

    def test_degenerate_scale(self):
        mu = np.array([1.0, -2.0])
        x = sample_correlated_gaussian(mu, 1e-20, PsdMatrix.scaled_identity(2), np.random.default_rng(0))
        np.testing.assert_allclose(x, mu, atol=1e-8)

    def test_non_positive_scale(self):
        with pytest.raises(ValueError):
            sample_correlated_gaussian(np.zeros(2), 0.0, PsdMatrix.scaled_identity(2), np.random.default_rng(0))
