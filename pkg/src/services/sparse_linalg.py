"""
Sparse Cholesky factorisation of SPD precision matrices.

CHOLMOD (scikit-sparse) is used when importable; otherwise SuperLU with a
symmetric fill-reducing ordering and no pivoting stands in, and tiny or
awkward systems drop to a dense Cholesky.
"""

import logging
from typing import Optional

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu, spsolve_triangular

logger = logging.getLogger(__name__)

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    from sksparse.cholmod import cholesky as cholmod_cholesky
    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover - depends on the environment
    HAVE_CHOLMOD = False

_fallback_warned = False
DIAG_BLOCK = 256


class SparseCholesky:
    """Factor of an SPD matrix with solves, log-determinant and sampling"""

    def __init__(self, matrix, backend: Optional[str] = None):
        global _fallback_warned
        A = sparse.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"Matrix must be square, got {A.shape}")
        self.n = A.shape[0]
        self.backend = backend or ("cholmod" if HAVE_CHOLMOD else "superlu")
        if self.backend == "cholmod":
            try:
                self._factor = cholmod_cholesky(A)
            except CholmodNotPositiveDefiniteError as e:
                raise np.linalg.LinAlgError(f"Matrix is not positive definite: {e}")
            return
        if not HAVE_CHOLMOD and not _fallback_warned:
            logger.warning("scikit-sparse not available; using SuperLU factorisation")
            _fallback_warned = True
        if self.backend == "superlu" and self.n > 1:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
            if np.array_equal(lu.perm_r, lu.perm_c):
                diag = lu.U.diagonal()
                if np.any(diag <= 0):
                    raise np.linalg.LinAlgError("Matrix is not positive definite")
                self._lu = lu
                self._diag = diag
                return
            logger.debug("SuperLU pivoted; using dense Cholesky")
        self.backend = "dense"
        try:
            self._dense = linalg.cho_factor(A.toarray(), lower=True)
        except linalg.LinAlgError as e:
            raise np.linalg.LinAlgError(f"Matrix is not positive definite: {e}")

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.backend == "cholmod":
            return self._factor.solve_A(b)
        if self.backend == "superlu":
            return self._lu.solve(b)
        return linalg.cho_solve(self._dense, b)

    def logdet(self) -> float:
        if self.backend == "cholmod":
            return float(self._factor.logdet())
        if self.backend == "superlu":
            return float(np.sum(np.log(self._diag)))
        return float(2.0 * np.sum(np.log(np.diag(self._dense[0]))))

    def sample_standard(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal columns z to draws with covariance A^-1"""
        z = np.asarray(z, dtype=float)
        if self.backend == "cholmod":
            return self._factor.apply_Pt(self._factor.solve_Lt(z, use_LDLt_decomposition=False))
        if self.backend == "superlu":
            unit_upper = sparse.diags(1.0 / self._diag) @ self._lu.U
            scaled = z / np.sqrt(self._diag)[:, None] if z.ndim == 2 else z / np.sqrt(self._diag)
            y = spsolve_triangular(sparse.csr_matrix(unit_upper), scaled, lower=False)
            return y[self._lu.perm_c]
        return linalg.solve_triangular(self._dense[0], z, lower=True, trans="T")

    def diag_inverse(self) -> np.ndarray:
        """Diagonal of A^-1 by blocked column solves"""
        out = np.empty(self.n)
        for start in range(0, self.n, DIAG_BLOCK):
            stop = min(start + DIAG_BLOCK, self.n)
            rhs = np.zeros((self.n, stop - start))
            rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
            cols = self.solve(rhs)
            out[start:stop] = cols[np.arange(start, stop), np.arange(stop - start)]
        return out


def factorize(matrix) -> SparseCholesky:
    return SparseCholesky(matrix)
