"""Factorisation helpers shared by the operator modules."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_LIMIT = 3000


class SingularOperator(np.linalg.LinAlgError):
    pass


class Factorized:
    """LU factorisation of a square (sparse or dense) matrix.

    Dense LAPACK is used below ``DENSE_LIMIT`` unknowns, SuperLU above.
    """

    def __init__(self, matrix, dense=None):
        n = matrix.shape[0]
        self.shape = matrix.shape
        self.dense = n <= DENSE_LIMIT if dense is None else dense
        self.complex = np.iscomplexobj(matrix.data if sp.issparse(matrix) else matrix)
        try:
            if self.dense:
                m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
                self._lu = sla.lu_factor(m, check_finite=True)
                if np.any(np.abs(np.diag(self._lu[0])) < 1e-300):
                    raise SingularOperator("zero pivot")
            else:
                self._lu = spla.splu(sp.csc_matrix(matrix), permc_spec="MMD_AT_PLUS_A")
        except (RuntimeError, ValueError, sla.LinAlgError) as exc:
            raise SingularOperator(str(exc)) from exc

    def solve(self, b, trans=False):
        b = b.toarray() if sp.issparse(b) else np.asarray(b)
        if self.complex and not np.iscomplexobj(b):
            b = b.astype(complex)
        elif not self.complex and np.iscomplexobj(b):
            return self.solve(b.real, trans) + 1j * self.solve(b.imag, trans)
        if self.dense:
            return sla.lu_solve(self._lu, b, trans=1 if trans else 0)
        return self._lu.solve(np.ascontiguousarray(b), trans="T" if trans else "N")

    def inverse(self):
        return self.solve(np.eye(self.shape[0]))


def sym_residual(m):
    m = m.toarray() if sp.issparse(m) else m
    return float(np.abs(m - m.T).max())


def dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def max_abs(m):
    if sp.issparse(m):
        return float(abs(m).max()) if m.nnz else 0.0
    m = np.asarray(m)
    return float(np.abs(m).max()) if m.size else 0.0
