"""
Tests for the sparse Cholesky wrapper
"""

import numpy as np
import pytest
from scipy import sparse

from src.services.sparse_linalg import HAVE_CHOLMOD, SparseCholesky, factorize

BACKENDS = ["superlu", "dense"] + (["cholmod"] if HAVE_CHOLMOD else [])


@pytest.fixture
def spd():
    """Tridiagonal SPD matrix with a dense corner"""
    n = 6
    A = sparse.diags([np.full(n - 1, -1.0), np.full(n, 3.0), np.full(n - 1, -1.0)], [-1, 0, 1]).tolil()
    A[0, n - 1] = A[n - 1, 0] = 0.5
    return A.tocsc()


class TestSparseCholesky:
    """Solves, log-determinants and sampling on every backend"""

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_solve(self, spd, backend):
        factor = SparseCholesky(spd, backend=backend)
        b = np.arange(1.0, 7.0)
        assert factor.solve(b) == pytest.approx(np.linalg.solve(spd.toarray(), b))

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_logdet(self, spd, backend):
        factor = SparseCholesky(spd, backend=backend)
        assert factor.logdet() == pytest.approx(np.linalg.slogdet(spd.toarray())[1])

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_sampling_covariance(self, spd, backend):
        """Draws M z have covariance M M' = A^-1"""
        factor = SparseCholesky(spd, backend=backend)
        M = factor.sample_standard(np.eye(6))
        assert M @ M.T == pytest.approx(np.linalg.inv(spd.toarray()), abs=1e-10)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_diag_inverse(self, spd, backend):
        factor = SparseCholesky(spd, backend=backend)
        assert factor.diag_inverse() == pytest.approx(np.diag(np.linalg.inv(spd.toarray())))

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_not_positive_definite(self, backend):
        with pytest.raises(np.linalg.LinAlgError):
            SparseCholesky(sparse.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])), backend=backend)

    def test_not_square(self):
        with pytest.raises(ValueError):
            factorize(sparse.csc_matrix(np.ones((2, 3))))

    def test_one_by_one(self):
        """Scalar systems work on the default backend"""
        factor = factorize(sparse.csc_matrix(np.array([[4.0]])))
        assert factor.solve(np.array([2.0])) == pytest.approx([0.5])
        assert factor.logdet() == pytest.approx(np.log(4.0))


class TestPerformance:
    def test_factorize_large_banded(self, benchmark):
        """Factorising a 5000 x 5000 banded precision stays fast"""
        n = 5000
        A = sparse.diags([np.full(n - 2, 0.5), np.full(n - 1, -1.0), np.full(n, 4.0), np.full(n - 1, -1.0),
                          np.full(n - 2, 0.5)], [-2, -1, 0, 1, 2], format="csc")
        factor = benchmark(factorize, A)
        assert np.isfinite(factor.logdet())
