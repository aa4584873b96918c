"""Quadratic forms and operators of the lattice model.

Conventions used throughout the package:

* Scalar fields are flat arrays over sites; vector (bond) fields are arrays of
  shape ``(3, nsites)``; spinor fields are flat arrays of length ``4 * nsites``
  with index ``4 * site + alpha``.
* Inner products carry the volume weight ``spacing**3``.  An operator is
  stored as the matrix ``K`` with ``(f, K g) = w * f . (K g)``.  Transposes
  are taken with respect to the weighted bilinear forms, so an operator from
  a fine lattice (weight 1) to its block lattice (weight ``L**3``) has
  transpose ``L**3 * K.T``.
* Fermion fields obey anti-periodic boundary conditions, realised as a sign
  ``-1`` on every bond that crosses the boundary.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .lattice import BondField, TorusLattice, block_path_sums

SIGMA = np.array([
    [[0, 1], [1, 0]],
    [[0, -1j], [1j, 0]],
    [[1, 0], [0, -1]],
], dtype=complex)


class CliffordError(ValueError):
    pass


def _intertwiner(gamma):
    """Solve ``C^T g C = -g^T`` for a real antisymmetric orthogonal ``C``.

    For orthogonal ``C`` the relation reads ``g C + C g^T = 0``, which is
    linear in ``C``.  The solution space is intersected with antisymmetric
    matrices, reduced to pivot form, summed and scaled to unit determinant.
    """
    eye = np.eye(4)
    rows = []
    for g in gamma:
        # vec(g C) = (I kron g) vec C ; vec(C g^T) = (g kron I) vec C  (column-major)
        rows.append(np.kron(eye, g) + np.kron(g, eye))
    antisym = np.zeros((16, 16))
    for i in range(4):
        for j in range(4):
            antisym[i + 4 * j, i + 4 * j] += 1
            antisym[i + 4 * j, j + 4 * i] += 1
    system = np.vstack(rows + [antisym])
    system = np.vstack([system.real, system.imag])
    null = sla.null_space(system)
    if null.shape[1] == 0:
        raise CliffordError("no antisymmetric intertwiner exists")
    # reduce the basis so each vector is 1 at its own pivot, then add them up
    _, _, piv = sla.qr(null.T, pivoting=True)
    piv = piv[:null.shape[1]]
    basis = null @ np.linalg.inv(null[piv])
    c = basis.sum(axis=1).reshape(4, 4, order="F")
    c[np.abs(c) < 1e-13] = 0.0
    return c / abs(np.linalg.det(c)) ** 0.25


class CliffordRep:
    """Euclidean gamma matrices in the reducible 4x4 representation.

    ``gamma[mu] = diag(sigma_mu, -sigma_mu)``.  The charge conjugation matrix
    is computed from the algebra unless one is supplied; either way all
    defining relations are asserted.
    """

    def __init__(self, wilson_r=1.0, gamma=None, conj=None, atol=1e-14):
        if not 0 < wilson_r <= 1:
            raise CliffordError(f"wilson_r={wilson_r} outside (0, 1]")
        self.wilson_r = float(wilson_r)
        if gamma is None:
            z = np.zeros((2, 2))
            gamma = np.array([np.block([[s, z], [z, -s]]) for s in SIGMA])
        self.gamma = np.asarray(gamma, dtype=complex)
        self.conj = _intertwiner(self.gamma) if conj is None else np.asarray(conj)
        bad = self.residuals()
        worst = max(bad.values())
        if worst > atol:
            name = max(bad, key=bad.get)
            raise CliffordError(f"representation fails {name} (residual {worst:.2e})")

    def hop(self, mu, sign):
        """Spin matrix ``gamma_{x x'}`` for ``x' = x + sign * e_mu``."""
        return 0.5 * (self.wilson_r * np.eye(4) + sign * self.gamma[mu])

    def residuals(self):
        g, c = self.gamma, self.conj
        eye = np.eye(4)
        out = {"anticommutator": 0.0, "hermitian": 0.0, "conj_relation": 0.0,
               "conj_antisym": 0.0, "conj_orthogonal": 0.0}
        for m in range(3):
            out["hermitian"] = max(out["hermitian"], np.abs(g[m] - g[m].conj().T).max())
            out["conj_relation"] = max(out["conj_relation"], np.abs(c.T @ g[m] @ c + g[m].T).max())
            for n in range(3):
                ac = g[m] @ g[n] + g[n] @ g[m] - 2 * (m == n) * eye
                out["anticommutator"] = max(out["anticommutator"], np.abs(ac).max())
        out["conj_antisym"] = np.abs(c.T + c).max()
        out["conj_orthogonal"] = np.abs(c.T @ c - eye).max()
        return out

    def hop_conjugation_residual(self):
        """max over bonds of ``|C^T gamma_{xx'} C - gamma_{x'x}^T|``."""
        c = self.conj
        worst = 0.0
        for mu in range(3):
            for s in (1, -1):
                worst = max(worst, np.abs(c.T @ self.hop(mu, s) @ c - self.hop(mu, -s).T).max())
        return float(worst)


@dataclass(frozen=True)
class ModelParams:
    """Bare couplings and the derived unit-lattice couplings after ``N`` scalings."""

    e: float = 1.0
    m: float = 0.5
    mu: float = 1.0
    a: float = 1.0
    L: int = 3
    N: int = 0
    M: int = 2
    r_exp: int = 1
    p_exp: int = 2
    wilson_r: float = 1.0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.e < 0:
            raise ValueError("coupling e must be non-negative")
        if self.mu <= 0:
            raise ValueError("photon mass mu must be positive")
        if self.a <= 0:
            raise ValueError("averaging stiffness a must be positive")
        if self.p_exp <= self.r_exp:
            raise ValueError("p_exp must exceed r_exp")

    @property
    def e0(self):
        return self.L ** (-self.N / 2) * self.e

    @property
    def m0(self):
        return float(self.L) ** (-self.N) * self.m

    @property
    def mu0(self):
        return float(self.L) ** (-self.N) * self.mu

    def _log_inv(self):
        if not 0 < self.e0 < 1:
            raise ValueError(f"r(e0), p(e0) need 0 < e0 < 1, got e0={self.e0}")
        return math.log(1.0 / self.e0)

    @property
    def r_e0(self):
        return self._log_inv() ** self.r_exp

    @property
    def p_e0(self):
        return self._log_inv() ** self.p_exp


# bosons ----------------------------------------------------------------
def laplacian_form(lattice, A, mu2):
    """``(A, (-Delta + mu2) A)`` with forward differences and weight ``spacing**3``."""
    v = A.values if isinstance(A, BondField) else np.asarray(A)
    w, eta = lattice.volume_weight, lattice.spacing
    total = 0.0
    for nu in range(3):
        d = (v[:, lattice.forward(nu)] - v) / eta
        total += w * float(np.sum(d * d))
    return total + mu2 * w * float(np.sum(v * v))


def laplacian_matrix(lattice, mu2=0.0, mask=None):
    """Scalar matrix of ``-Delta + mu2`` (applied to each vector component).

    With ``mask`` the Laplacian keeps only bonds with both ends in the mask
    (Neumann restriction) and is returned on the masked sites only.
    """
    n = lattice.nsites
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    for nu in range(3):
        f = lattice.forward(nu)
        ok = keep & keep[f]
        src = np.flatnonzero(ok)
        dst = f[ok]
        rows += [src, dst]
        cols += [dst, src]
        vals += [-np.ones(src.size), -np.ones(src.size)]
        np.add.at(diag, src, 1.0)
        np.add.at(diag, dst, 1.0)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    m = m / lattice.spacing ** 2 + mu2 * sp.identity(n, format="csr")
    if mask is not None:
        idx = np.flatnonzero(keep)
        m = m[idx][:, idx]
    return m.tocsr()


def average_boson(lattice):
    """Scalar block average ``Q`` from ``lattice`` to ``lattice.coarse()`` (sparse)."""
    L = lattice.L
    nc = (lattice.side // L) ** 3
    return sp.csr_matrix((np.full(lattice.nsites, float(L) ** -3),
                          (lattice.block_labels, np.arange(lattice.nsites))),
                         shape=(nc, lattice.nsites))


def weighted_transpose(K, w_domain, w_range):
    """Transpose of ``K`` for inner products with weights ``w_domain``/``w_range``."""
    return (w_range / w_domain) * K.T


def average_boson_T(lattice):
    """``Q^T``: coarse to fine, ``(Q^T h)(x) = h(y)`` for ``x`` in ``B(y)``."""
    return weighted_transpose(average_boson(lattice), lattice.volume_weight,
                              lattice.coarse().volume_weight).tocsr()


def apply_components(K, values):
    """Apply a scalar matrix to each of the three components of a vector field."""
    return np.stack([K @ values[m] for m in range(3)])


# fermions ----------------------------------------------------------------
def _bond_phases(lattice, A, e, antiperiodic):
    eta = lattice.spacing
    v = np.zeros((3, lattice.nsites)) if A is None else (
        A.values if isinstance(A, BondField) else np.asarray(A))
    ph = np.exp(1j * e * eta * v)
    if antiperiodic:
        for mu in range(3):
            ph[mu] = np.where(lattice.wraps(mu), -ph[mu], ph[mu])
    return ph


def dirac_matrix(lattice, A, e, rep, antiperiodic=True, mask=None, dense=False):
    """Wilson-Dirac operator ``D_e(A)`` on spinor fields.

    ``(D psi)(x) = spacing**-1 * [ sum_mu (r + g_mu)/2 U_mu(x) psi(x + e_mu)
    + (r - g_mu)/2 conj(U_mu(x - e_mu)) psi(x - e_mu) - 3 r psi(x) ]`` with
    ``U_mu(x) = exp(i e spacing A_mu(x))`` and a sign on wraparound bonds.
    With ``mask`` only bonds inside the mask survive and the result is the
    restriction to masked sites.
    """
    n = lattice.nsites
    ph = _bond_phases(lattice, A, e, antiperiodic)
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    blocks_r, blocks_c, blocks_v = [], [], []
    sites = np.arange(n)
    for mu in range(3):
        f = lattice.forward(mu)
        ok = keep & keep[f]
        fwd, bwd = rep.hop(mu, 1), rep.hop(mu, -1)
        # x -> x + e_mu
        blocks_r.append(sites[ok])
        blocks_c.append(f[ok])
        blocks_v.append(ph[mu][ok, None, None] * fwd[None])
        # x + e_mu -> x : A(x + e, x) = -A_mu(x)
        blocks_r.append(f[ok])
        blocks_c.append(sites[ok])
        blocks_v.append(np.conj(ph[mu][ok])[:, None, None] * bwd[None])
    blocks_r.append(sites)
    blocks_c.append(sites)
    blocks_v.append(np.broadcast_to(-3 * rep.wilson_r * np.eye(4), (n, 4, 4)))
    R = np.concatenate(blocks_r)
    Cc = np.concatenate(blocks_c)
    V = np.concatenate(blocks_v) / lattice.spacing
    a = np.arange(4)
    rows = (4 * R[:, None, None] + a[None, :, None]) + 0 * a[None, None, :]
    cols = (4 * Cc[:, None, None] + a[None, None, :]) + 0 * a[None, :, None]
    m = sp.csr_matrix((V.ravel(), (rows.ravel(), cols.ravel())), shape=(4 * n, 4 * n))
    m.sum_duplicates()
    if mask is not None:
        idx = spinor_indices(np.flatnonzero(keep))
        m = m[idx][:, idx]
    return m.toarray() if dense else m


def spinor_indices(sites):
    sites = np.asarray(sites)
    return (4 * sites[:, None] + np.arange(4)[None, :]).ravel()


def dirac_apply(lattice, A, e, rep, psi, antiperiodic=True):
    psi = np.asarray(psi)
    if psi.shape != (4 * lattice.nsites,):
        raise ValueError(f"spinor field needs length {4 * lattice.nsites}, got {psi.shape}")
    if isinstance(A, BondField) and A.lattice != lattice:
        raise ValueError("gauge field lives on a different lattice")
    return dirac_matrix(lattice, A, e, rep, antiperiodic) @ psi


def gauge_phase(lattice, lam, e):
    """Spinor-space diagonal ``exp(i e lam)`` as a vector of length ``4 nsites``."""
    return np.repeat(np.exp(1j * e * np.asarray(lam)), 4)


def spin_conj(nsites, rep):
    """``I (x) C`` on spinor fields."""
    return sp.kron(sp.identity(nsites), sp.csr_matrix(rep.conj)).tocsr()


def charge_conjugation_check(lattice, A, e, rep):
    """Residual of ``(I C)^T D(-A) (I C) = D(A)^T`` and of the blockwise hop relation."""
    c = spin_conj(lattice.nsites, rep)
    lhs = (c.T @ dirac_matrix(lattice, -A, e, rep) @ c).toarray()
    rhs = dirac_matrix(lattice, A, e, rep).T.toarray()
    res = max(float(np.abs(lhs - rhs).max()), rep.hop_conjugation_residual())
    return res < 1e-12, res


def average_fermion(lattice, A, e, antiperiodic=True):
    """``Q_e(A)``: spinor block average with path phases ``exp(i e spacing A(Gamma_yx))``.

    ``A(Gamma_yx)`` is the reverse-oriented path sum of :func:`path_sum`, so
    ``Q_e(A - d lam) = exp(i e lam) Q_e(A) exp(-i e lam)`` just like ``D_e``.
    Paths that cross the boundary pick up the anti-periodic sign.
    """
    L = lattice.L
    nc = (lattice.side // L) ** 3
    if A is None:
        phase = np.ones(lattice.nsites, dtype=complex)
    else:
        v = A.values if isinstance(A, BondField) else np.asarray(A)
        phase = np.exp(1j * e * lattice.spacing * block_path_sums(lattice, v))
    if antiperiodic:
        phase = phase * _crossing_sign(lattice)
    vals = np.repeat(phase * float(L) ** -3, 4)
    rows = spinor_indices(lattice.block_labels)
    cols = np.arange(4 * lattice.nsites)
    return sp.csr_matrix((vals, (rows, cols)), shape=(4 * nc, 4 * lattice.nsites))


def _crossing_sign(lattice):
    # blocks are centred at L*y in [0, side); only the low-centre blocks wrap
    c = np.asarray(lattice.coords)
    h = (lattice.L - 1) // 2
    crossings = np.sum(c >= lattice.side - h, axis=1)
    return np.where(crossings % 2, -1.0, 1.0)


def average_fermion_T(lattice, A, e, antiperiodic=True):
    """``Q_e(A)^T``: ``(Q^T f)(x) = exp(i e A(Gamma_yx)) f(y)``."""
    q = average_fermion(lattice, A, e, antiperiodic)
    return weighted_transpose(q, lattice.volume_weight, lattice.coarse().volume_weight).tocsr()


# dump format ------------------------------------------------------------
_TAGS = {np.dtype(np.complex128): 1, np.dtype(np.float64): 0}


class SpinorOperator:
    """A matrix over (site, spinor) pairs with a 4x4 kernel accessor."""

    def __init__(self, lattice, matrix, range_lattice=None):
        self.lattice = lattice
        self.range_lattice = range_lattice or lattice
        self.matrix = matrix
        if matrix.shape != (4 * self.range_lattice.nsites, 4 * lattice.nsites):
            raise ValueError("matrix shape does not match lattices")

    def kernel(self, x, y):
        i = int(self.range_lattice.index(np.asarray(x)))
        j = int(self.lattice.index(np.asarray(y)))
        blk = self.matrix[4 * i:4 * i + 4, 4 * j:4 * j + 4]
        return blk.toarray() if sp.issparse(blk) else np.array(blk)

    def dense(self):
        return self.matrix.toarray() if sp.issparse(self.matrix) else np.asarray(self.matrix)

    def transpose(self):
        t = weighted_transpose(self.matrix, self.lattice.volume_weight,
                               self.range_lattice.volume_weight)
        return SpinorOperator(self.range_lattice, t, self.lattice)

    def dump(self, path):
        m = np.ascontiguousarray(self.dense().astype(np.complex128))
        with open(path, "wb") as fh:
            fh.write(struct.pack("<iiii", m.shape[0], m.shape[1], _TAGS[m.dtype], 0))
            fh.write(m.view(np.float64).tobytes())

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            rows, cols, tag, _ = struct.unpack("<iiii", fh.read(16))
            data = np.frombuffer(fh.read(), dtype=np.float64)
        if tag != 1:
            raise ValueError(f"unsupported scalar tag {tag}")
        return data.view(np.complex128).reshape(rows, cols)


def unit_lattice(side, L=3, scales=None):
    return TorusLattice(side, L, 0, scales)
