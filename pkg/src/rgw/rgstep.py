"""Linear algebra of a single block-spin step.

Boson and fermion fluctuation covariances, the background interpolation
operators ``H1``, the diagonalising translations and their local versions on
small-field regions, the potential ``V0`` with its block localisation, the
left inverse ``M_Lambda`` and the rescaled operators of the next lattice.

Fermion bilinear forms ``(psibar, K psi)`` are evaluated with commuting
coefficient vectors; every identity here is bilinear in (barred, unbarred)
pairs so this is equivalent to the Grassmann statement.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .lattice import BondField, RegionMask, TorusLattice
from .linalg import DENSE_LIMIT, Factorized, SingularOperator
from .operators import (CliffordRep, ModelParams, apply_components, average_boson,
                        average_boson_T, average_fermion, average_fermion_T,
                        dirac_matrix, laplacian_form, laplacian_matrix, spinor_indices)

DEFAULT_ROUGHNESS = 1e-2


class FieldTooRough(ValueError):
    pass


class SingularDSharp(np.linalg.LinAlgError):
    pass


def roughness(lattice, A, e0):
    """``e0 * max |d_nu A_mu|`` over all sites and directions."""
    A = A if isinstance(A, BondField) else BondField(lattice, A)
    return e0 * max(float(np.abs(A.derivative(nu)).max()) for nu in range(3))


def _coarse_mask(lattice, region):
    """Coarse sites whose block lies in ``region`` (boolean, length ``Nc``)."""
    if region is None:
        return np.ones(lattice.coarse().nsites, dtype=bool)
    cl = lattice.coarse()
    return region.sites[lattice.index(lattice.L * cl.coords)]


class _Restricted:
    """``op_X = chi op chi`` on the sites of ``mask`` with a cached inverse."""

    def __init__(self, matrix, mask, block=1):
        self.mask = np.asarray(mask, dtype=bool)
        sites = np.flatnonzero(self.mask)
        self.idx = spinor_indices(sites) if block == 4 else sites
        self.size = block * self.mask.size
        self.matrix = matrix

    @cached_property
    def solver(self):
        return Factorized(self.matrix)

    def _embed(self, y, shape):
        out = np.zeros(shape, dtype=np.result_type(y, float))
        out[self.idx] = y
        return out

    def apply(self, v):
        v = np.asarray(v)
        return self._embed(self.matrix @ v[self.idx], v.shape)

    def solve(self, v, trans=False):
        """``[op]_X^{-1} v`` embedded by zero (first restrict, then invert)."""
        v = np.asarray(v)
        return self._embed(self.solver.solve(v[self.idx], trans=trans), v.shape)

    def inverse(self):
        out = np.zeros((self.size, self.size), dtype=self.matrix.dtype)
        out[np.ix_(self.idx, self.idx)] = self.solver.inverse()
        return out


# bosons -------------------------------------------------------------------
class BosonRGKit:
    """``Delta_sharp``, ``C``, ``H1`` and ``Delta_tilde1`` for one scalar component."""

    def __init__(self, lattice, params):
        if lattice.side % lattice.L:
            raise ValueError(f"side {lattice.side} not divisible by L={lattice.L}")
        if params.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        self.lattice, self.params = lattice, params
        self.coarse = lattice.coarse()
        L, a = lattice.L, params.a
        self.k = a / L ** 2
        self.w_f, self.w_c = lattice.volume_weight, self.coarse.volume_weight
        self.Q = average_boson(lattice)
        self.QT = average_boson_T(lattice)
        self.qtq = (self.QT @ self.Q).tocsr()
        self.delta_sharp = (laplacian_matrix(lattice, params.mu0 ** 2) + self.k * self.qtq).tocsc()

    @cached_property
    def solver(self):
        try:
            return Factorized(self.delta_sharp)
        except SingularOperator as exc:  # pragma: no cover - mu0 > 0 rules this out
            raise AssertionError(f"Delta_sharp singular: {exc}") from exc

    @cached_property
    def C(self):
        return self.solver.inverse()

    @cached_property
    def H1(self):
        return self.k * self.solver.solve(self.QT.toarray())

    @cached_property
    def delta_tilde1(self):
        return self.k * np.eye(self.coarse.nsites) - self.k * (self.Q @ self.H1)

    def apply_H1(self, A):
        """``H1`` on a coarse field (scalar or ``(3, Nc)``) without forming the matrix."""
        A = np.asarray(A)
        if A.ndim == 2:
            return self.k * self.solver.solve((self.QT @ A.T)).T
        return self.k * self.solver.solve(self.QT @ A)

    def restricted(self, mask):
        """``[Delta_sharp]_X`` with the Laplacian's bonds leaving ``X`` removed."""
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        m = laplacian_matrix(self.lattice, self.params.mu0 ** 2, mask) + self.k * self.qtq[idx][:, idx]
        return _Restricted(m.tocsc(), mask)


def build_boson_kit(lattice, params, dense=None):
    """Assemble the kit; ``dense`` (default: small lattices) also forms ``C``."""
    kit = BosonRGKit(lattice, params)
    if lattice.nsites <= DENSE_LIMIT if dense is None else dense:
        kit.C  # noqa: B018
    else:
        kit.solver  # noqa: B018
    return kit


def boson_translate_check(kit, A, A0):
    """Absolute residual of the boson diagonalisation identity.

    ``A`` has shape ``(3, Nc)``, ``A0`` shape ``(3, N)``.  Returns
    ``(residual, scale)`` where ``scale`` is the size of the larger side.
    """
    A, A0 = np.asarray(A, float), np.asarray(A0, float)
    if A.shape != (3, kit.coarse.nsites) or A0.shape != (3, kit.lattice.nsites):
        raise ValueError("fields do not match the kit's lattices")
    shift = A0 + kit.apply_H1(A)
    d = A - apply_components(kit.Q, shift)
    lhs = 0.5 * kit.k * kit.w_c * float(np.sum(d * d)) + 0.5 * laplacian_form(
        kit.lattice, shift, kit.params.mu0 ** 2)
    dt = kit.delta_tilde1
    rhs = 0.5 * kit.w_c * float(np.sum(A * (dt @ A.T).T)) + 0.5 * kit.w_f * float(
        np.sum(A0 * apply_components(kit.delta_sharp, A0)))
    return abs(lhs - rhs), max(abs(lhs), abs(rhs), 1e-300)


def boson_inverse_check(kit, A, A0):
    """Undo the translation: the diagonal form at ``A0 - H1 A`` is the original form."""
    A, A0 = np.asarray(A, float), np.asarray(A0, float)
    d = A - apply_components(kit.Q, A0)
    orig = 0.5 * kit.k * kit.w_c * float(np.sum(d * d)) + 0.5 * laplacian_form(
        kit.lattice, A0, kit.params.mu0 ** 2)
    B0 = A0 - kit.apply_H1(A)
    diag = 0.5 * kit.w_c * float(np.sum(A * (kit.delta_tilde1 @ A.T).T)) + 0.5 * kit.w_f * float(
        np.sum(B0 * apply_components(kit.delta_sharp, B0)))
    return abs(orig - diag), max(abs(orig), 1e-300)


# fermions -----------------------------------------------------------------
class FermionRGKit:
    """``D_sharp(A)`` and everything built from it.

    The global factorisation is lazy so restricted operators can be used on
    lattices where a full sparse LU would be too expensive.
    """

    def __init__(self, lattice, params, A=None, rep=None, threshold=DEFAULT_ROUGHNESS):
        if lattice.side % lattice.L:
            raise ValueError(f"side {lattice.side} not divisible by L={lattice.L}")
        self.lattice, self.params = lattice, params
        self.rep = rep or CliffordRep(params.wilson_r)
        self.A = A if isinstance(A, BondField) else BondField(lattice, A)
        e0 = params.e0 if params.e > 0 else 0.0
        self.e0 = e0
        rough = roughness(lattice, self.A, e0)
        if rough > threshold:
            raise FieldTooRough(f"e0|dA| = {rough:.3e} exceeds threshold {threshold:.3e}")
        self.coarse = lattice.coarse()
        self.k = params.a / lattice.L
        self.w_f, self.w_c = lattice.volume_weight, self.coarse.volume_weight
        self.D = dirac_matrix(lattice, self.A, e0, self.rep)
        n = self.D.shape[0]
        self.Dm = (self.D + params.m0 * sp.identity(n)).tocsr()
        self.Qp = average_fermion(lattice, self.A, e0)
        self.Qm = average_fermion(lattice, -self.A, e0)
        self.QpT = average_fermion_T(lattice, self.A, e0)
        self.QmT = average_fermion_T(lattice, -self.A, e0)
        self.d_sharp = (self.Dm + self.k * (self.QmT @ self.Qp)).tocsc()

    @cached_property
    def solver(self):
        try:
            return Factorized(self.d_sharp)
        except SingularOperator as exc:
            raise SingularDSharp(str(exc)) from exc

    @cached_property
    def gamma(self):
        return self.solver.inverse()

    @cached_property
    def H(self):
        """``H1(A)`` on ``Psi``: ``(a/L) Gamma Q(-A)^T``."""
        return self.k * self.solver.solve(self.QmT.toarray())

    @cached_property
    def Hbar(self):
        """``H1(A)`` on ``Psibar``: ``(a/L) Gamma^T Q(A)^T``."""
        return self.k * self.solver.solve(self.QpT.toarray(), trans=True)

    @cached_property
    def d_tilde1(self):
        return self.k * np.eye(self.Qp.shape[0]) - self.k * (self.Qp @ self.H)

    def restricted(self, mask):
        """``[D_sharp]_X = chi D_sharp chi`` on the sites of ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        idx = spinor_indices(np.flatnonzero(mask))
        return _Restricted(self.d_sharp[idx][:, idx].tocsc(), mask, block=4)

    def m_op(self, region):
        """``M_Lambda`` on ``Psi`` and ``Psibar`` together with ``H_{1,Lambda}``.

        Returns dense ``(M, Mbar, H_L, Hbar_L, cmask)`` with ``cmask`` the
        spinor indices of coarse sites in the region.
        """
        sub = self.restricted(region.sites)
        dl = np.zeros(self.d_sharp.shape, dtype=complex)
        dl[np.ix_(sub.idx, sub.idx)] = sub.matrix.toarray()
        gl = sub.inverse()
        cm = spinor_indices(np.flatnonzero(_coarse_mask(self.lattice, region)))
        inv_k = 1.0 / self.k
        M = inv_k * (self.Qp @ dl)[cm]
        Mbar = inv_k * (self.Qm @ dl.T)[cm]
        H_L = self.k * (gl @ self.QmT.toarray())[:, cm]
        Hbar_L = self.k * (gl.T @ self.QpT.toarray())[:, cm]
        return M, Mbar, H_L, Hbar_L, cm

    def logdet(self):
        """``log det D_sharp`` (complex) from a dense LU."""
        sign, ld = np.linalg.slogdet(self.d_sharp.toarray())
        return ld + np.log(sign)


def build_fermion_kit(lattice, params, A=None, rep=None, threshold=DEFAULT_ROUGHNESS, dense=None):
    kit = FermionRGKit(lattice, params, A, rep, threshold)
    if 4 * lattice.nsites <= DENSE_LIMIT if dense is None else dense:
        kit.solver, kit.H, kit.Hbar, kit.d_tilde1  # noqa: B018 - force assembly
    return kit


def fermion_blocks(kit):
    """Blocks ``(K11, K12, K21, K22)`` of the weighted fermion form.

    Variables are ordered ``(Psi, Psi_0)`` on both the barred and unbarred
    side.  ``K11`` is dense (coarse sized), the rest stay sparse.
    """
    nc = kit.Qp.shape[0]
    wc, wf, k = kit.w_c, kit.w_f, kit.k
    K11 = wc * k * np.eye(nc, dtype=complex)
    K12 = (-wc * k) * kit.Qp.tocsr()
    K21 = ((-wc * k) * kit.Qm.T).tocsr()
    K22 = (wc * k * (kit.Qm.T @ kit.Qp) + wf * kit.Dm).tocsr()
    return K11, K12, K21, K22


def fermion_forms(kit):
    """Dense coefficient matrices of the fermion form before and after translation.

    Returns ``(K, T, Tbar)`` with ``T = [[I, 0], [H, I]]`` and ``Tbar``
    likewise with ``Hbar``.  Only meant for small lattices.
    """
    nc, nf = kit.Qp.shape
    K11, K12, K21, K22 = fermion_blocks(kit)
    K = np.block([[K11, K12.toarray()], [K21.toarray(), K22.toarray()]])
    T = np.eye(nc + nf, dtype=complex)
    T[nc:, :nc] = kit.H
    Tb = np.eye(nc + nf, dtype=complex)
    Tb[nc:, :nc] = kit.Hbar
    return K, T, Tb


def fermion_translate_check(kit):
    """Max entry of ``Tbar^T K T - blockdiag(wc D_tilde1, wf D_sharp)``.

    Also returns the largest cross-block entry after translation.  The
    product is formed block by block, so no dense fine-by-fine matrix appears.
    """
    K11, K12, K21, K22 = fermion_blocks(kit)
    H, Hb = kit.H, kit.Hbar
    left = K21 + K22 @ H                       # lower-left of K T
    top = K11 + K12 @ H + Hb.T @ left          # upper-left of Tbar^T K T
    cross_up = np.asarray((K22.T @ Hb).T) + K12.toarray()
    res_cc = np.abs(top - kit.w_c * kit.d_tilde1).max()
    res_ff = abs(K22 - kit.w_f * kit.d_sharp).max()
    cross = max(np.abs(cross_up).max(), np.abs(left).max())
    return float(max(res_cc, res_ff, cross)), float(cross)


def fermion_inverse_check(kit, rng):
    """Undo the translation on random coefficient vectors."""
    K11, K12, K21, K22 = fermion_blocks(kit)
    nc, nf = kit.Qp.shape
    n = nc + nf
    u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    ub = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    orig = (ub[:nc] @ (K11 @ u[:nc] + K12 @ u[nc:])
            + ub[nc:] @ (K21 @ u[:nc] + K22 @ u[nc:]))
    # T and Tbar are unit lower block triangular: forward substitution solves them
    Ti = np.concatenate([u[:nc], u[nc:] - kit.H @ u[:nc]])
    Tbi = np.concatenate([ub[:nc], ub[nc:] - kit.Hbar @ ub[:nc]])
    diag = kit.w_c * Tbi[:nc] @ kit.d_tilde1 @ Ti[:nc] + kit.w_f * Tbi[nc:] @ (kit.d_sharp @ Ti[nc:])
    return float(abs(orig - diag)), float(abs(orig))


# the potential -------------------------------------------------------------
@dataclass
class BilinearForm:
    """Degree-2 Grassmann element ``sum K_ij bar_i unbar_j``.

    Rows index the barred generators ``(Psibar, Psibar_0)``, columns the
    unbarred ``(Psi, Psi_0)``; ``nc`` is the number of coarse components.
    """

    matrix: sp.csr_matrix
    nc: int
    lattice: TorusLattice

    def norm(self, h):
        return h * h * float(abs(self.matrix).sum())

    def evaluate(self, bar, unbar):
        return complex(bar @ (self.matrix @ unbar))

    def locations(self):
        """Fine site carrying each generator; coarse ``y`` sits at ``L y``."""
        lat = self.lattice
        cl = lat.coarse()
        cs = lat.index(lat.L * cl.coords)
        site = np.concatenate([cs, np.arange(lat.nsites)])
        return np.repeat(site, 4)

    def to_grassmann(self, algebra_cls):
        """Expand into an explicit element with barred generators first."""
        n = self.matrix.shape[0]
        m = self.matrix.tocoo()
        terms = {}
        for i, j, v in zip(m.row, m.col, m.data):
            terms[(int(i), int(n + j))] = terms.get((int(i), int(n + j)), 0) + v
        return algebra_cls.from_terms(2 * n, terms)


def fermion_form_matrix(lattice, params, A, rep):
    """Sparse coefficient matrix of ``(a/L)|Psi - Q(A) Psi0|^2 + (Psibar0, (D+m) Psi0)``."""
    e0 = params.e0 if params.e > 0 else 0.0
    cl = lattice.coarse()
    wc, wf, k = cl.volume_weight, lattice.volume_weight, params.a / lattice.L
    qp = average_fermion(lattice, A, e0)
    qm = average_fermion(lattice, -A, e0)
    dm = dirac_matrix(lattice, A, e0, rep) + params.m0 * sp.identity(4 * lattice.nsites)
    nc = qp.shape[0]
    return sp.bmat([[wc * k * sp.identity(nc), -wc * k * qp],
                    [-wc * k * qm.T, wc * k * (qm.T @ qp) + wf * dm]]).tocsr(), nc


def potential_v0(lattice, params, A_tilde, A0, rep=None):
    """``V0`` = form at ``A_tilde + A0`` minus the form at ``A_tilde``."""
    rep = rep or CliffordRep(params.wilson_r)
    At = A_tilde if isinstance(A_tilde, BondField) else BondField(lattice, A_tilde)
    B = A0 if isinstance(A0, BondField) else BondField(lattice, A0)
    k1, nc = fermion_form_matrix(lattice, params, At + B, rep)
    k0, _ = fermion_form_matrix(lattice, params, At, rep)
    diff = (k1 - k0).tocsr()
    diff.eliminate_zeros()
    return BilinearForm(diff, nc, lattice)


def localize_potential(v0, block_side):
    """Split ``V0`` by the blocks of its barred and unbarred generators.

    Returns ``{(delta, delta_prime): BilinearForm}``; the keys are block
    labels of the side-``block_side`` partition.
    """
    labels, _ = v0.lattice.block_partition(block_side)
    loc = labels[v0.locations()]
    m = v0.matrix.tocoo()
    out = {}
    rb, cb = loc[m.row], loc[m.col]
    keys = np.stack([rb, cb], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    for n, (b1, b2) in enumerate(uniq):
        sel = inv == n
        piece = sp.csr_matrix((m.data[sel], (m.row[sel], m.col[sel])), shape=m.shape)
        out[(int(b1), int(b2))] = BilinearForm(piece, v0.nc, v0.lattice)
    return out


def blocks_adjacent(lattice, block_side, b1, b2):
    """True when the two blocks coincide or share a face."""
    nb = lattice.side // block_side
    c1 = np.array(np.unravel_index(b1, (nb, nb, nb)))
    c2 = np.array(np.unravel_index(b2, (nb, nb, nb)))
    d = np.abs(c1 - c2)
    d = np.minimum(d, nb - d)
    return int(d.sum()) <= 1


# local translations on regions ------------------------------------------------
@dataclass
class QuadraticFormLedger:
    """Pieces of a translated quadratic form on a small-field region."""

    total: float
    main: float
    W: dict
    F: float
    tags: dict = field(default_factory=dict)

    @property
    def W_total(self):
        return sum(self.W.values())

    @property
    def residual(self):
        return abs(self.total - (self.main + self.W_total + self.F))


class ExactLocal:
    """Stand-in local propagator equal to the exact one (global or restricted)."""

    def __init__(self, kit):
        self.kit = kit
        self._sub = {}

    def _restricted(self, mask):
        key = mask.tobytes()
        if key not in self._sub:
            self._sub[key] = self.kit.restricted(mask)
        return self._sub[key]

    def apply(self, v, mask=None, trans=False):
        if mask is None:
            return self.kit.solver.solve(v, trans=trans)
        return self._restricted(np.asarray(mask, dtype=bool)).solve(v, trans=trans)


def _boson_dot(w, x, y):
    return w * float(np.sum(x * y))


def wb_decomposition(kit, region, A, A0, local=None):
    """Boson form after ``A0 -> A0 + [H1_loc A]_{Omega'}`` split as main + W1 + W2 + F.

    ``local`` applies ``C_loc`` (object with ``apply(v)``); by default the
    exact ``C``.  ``A`` is ``(3, Nc)``, ``A0`` is ``(3, N)``.
    """
    local = local or ExactLocal(kit)
    lat, k = kit.lattice, kit.k
    A, A0 = np.asarray(A, float), np.asarray(A0, float)
    f_in = region.sites
    f_in1 = region.shrink(1).sites
    c_in = _coarse_mask(lat, region)
    A_om = A * c_in
    A0_om = A0 * f_in

    def hl(v):
        return k * local.apply((kit.QT @ v.T)).T

    def hg(v):
        return kit.apply_H1(v)

    def ds(v):
        return apply_components(kit.delta_sharp, v)

    def q(v):
        return apply_components(kit.Q, v)

    wf, wc = kit.w_f, kit.w_c
    h = hl(A) * f_in1
    d = A - q(A0 + h)
    total = 0.5 * k * _boson_dot(wc, d, d) + 0.5 * laplacian_form(lat, A0 + h, kit.params.mu0 ** 2)
    Hg = hg(A_om)
    Hl = hl(A_om)
    dH = Hl - Hg
    main = 0.5 * _boson_dot(wc, A_om, k * A_om - k * q(Hg)) + 0.5 * _boson_dot(wf, A0, ds(A0))
    W1 = _boson_dot(wf, A0_om, ds(dH))
    W2 = (-k * _boson_dot(wc, A_om, q(dH)) + 0.5 * _boson_dot(wf, dH, ds(Hl))
          + 0.5 * _boson_dot(wf, Hg, ds(dH)))
    F = total - main - W1 - W2
    tags = {"F": "complement of Omega''", "W1": "Omega", "W2": "Omega"}
    return QuadraticFormLedger(total, main, {"W1": W1, "W2": W2}, F, tags)


def boson_w_kernels(kit, region, local_matrix):
    """Dense kernels with ``W1 = (A0, w1 A)`` and ``W2 = (1/2)(A, w2 A)`` (weighted)."""
    k, wf, wc = kit.k, kit.w_f, kit.w_c
    c_in = _coarse_mask(kit.lattice, region).astype(float)
    f_in = region.sites.astype(float)
    qt = kit.QT.toarray() * c_in[None, :]
    hg = kit.solver.solve(qt) * k
    lm = local_matrix.toarray() if sp.issparse(local_matrix) else np.asarray(local_matrix)
    hl = k * lm @ qt
    dh = hl - hg
    ds = kit.delta_sharp.toarray()
    w1 = wf * f_in[:, None] * (ds @ dh)
    q = kit.Q.toarray()
    w2 = -k * wc * (c_in[:, None] * (q @ dh)) + 0.5 * wf * dh.T @ ds @ hl + 0.5 * wf * hg.T @ ds @ dh
    w2 = w2 + w2.T
    return w1, w2


def wf_decomposition(kit, region, fields, local=None):
    """Fermion form after ``Psi0 -> Psi0 + [H1_loc Psi]_{Lambda'}`` split as main + W3 + W4 + W5 + F.

    ``fields`` is ``(psibar, psi, psibar0, psi0)`` as coefficient vectors.
    ``local.apply(v, mask, trans)`` gives ``Gamma_loc`` (``mask=None``) or
    ``Gamma_loc_Lambda`` on ``v``; the default is the exact propagator.
    """
    local = local or ExactLocal(kit)
    pb, ps, pb0, ps0 = (np.asarray(f, dtype=complex) for f in fields)
    lat, k, wf, wc = kit.lattice, kit.k, kit.w_f, kit.w_c
    lam = region.sites
    chi = np.repeat(lam, 4)
    chi1 = np.repeat(region.shrink(1).sites, 4)
    cchi1 = np.repeat(_coarse_mask(lat, region.shrink(1)), 4)
    sub = kit.restricted(lam)

    def bdot(x, y, w):
        return w * complex(x @ y)

    def hl(v, mask=None):
        return k * local.apply(kit.QmT @ v, mask)

    def hlb(v, mask=None):
        return k * local.apply(kit.QpT @ v, mask, trans=True)

    def h_res(v):
        return k * sub.solve(kit.QmT @ v)

    def hb_res(v):
        return k * sub.solve(kit.QpT @ v, trans=True)

    def ds_res(v):
        return chi * (kit.d_sharp @ (chi * v))

    # translated form
    p0 = ps0 + chi1 * hl(ps)
    q0 = pb0 + chi1 * hlb(pb)
    total = (bdot(pb - kit.Qm @ q0, ps - kit.Qp @ p0, wc * k) + bdot(q0, kit.Dm @ p0, wf))
    # main diagonal pieces
    p1, q1 = cchi1 * ps, cchi1 * pb
    main = bdot(q1, k * p1 - k * (kit.Qp @ hl(p1)), wc) + bdot(pb0, kit.d_sharp @ ps0, wf)
    # W3: cross terms with local minus restricted-exact H
    W3 = (bdot(chi * pb0, ds_res(hl(p1, lam) - h_res(p1)), wf)
          + bdot(hlb(q1, lam) - hb_res(q1), ds_res(chi * ps0), wf))

    def quad(x, xb):
        return (bdot(q1, p1, wc * k) - bdot(q1, kit.Qp @ x, wc * k) - bdot(kit.Qm @ xb, p1, wc * k)
                + bdot(xb, ds_res(x), wf))

    W4 = quad(hl(p1, lam), hlb(q1, lam)) - quad(h_res(p1), hb_res(q1))
    W5 = quad(h_res(p1), hb_res(q1)) - bdot(q1, k * p1 - k * (kit.Qp @ hl(p1, lam)), wc)
    F = total - main - W3 - W4 - W5
    tags = {"F": "complement of Lambda''", "W3": "Lambda", "W4": "Lambda", "W5": "Lambda"}
    return QuadraticFormLedger(total, main, {"W3": W3, "W4": W4, "W5": W5}, F, tags)


def probe_localization(decompose, fields, supports, rng, scale=1.0):
    """Largest change of ``F`` when every field is perturbed on its ``supports`` mask.

    ``decompose(fields)`` returns a ledger; ``supports`` lists one boolean
    mask (broadcastable to the field) per field.
    """
    base = decompose(fields).F
    worst = 0.0
    for i in range(len(fields)):
        moved = list(fields)
        f = np.asarray(fields[i])
        noise = rng.standard_normal(f.shape)
        if np.iscomplexobj(f):
            noise = noise + 1j * rng.standard_normal(f.shape)
        moved[i] = f + scale * noise * supports[i]
        worst = max(worst, abs(decompose(moved).F - base))
    moved = [np.asarray(f) + scale * rng.standard_normal(np.shape(f)) * s
             for f, s in zip(fields, supports)]
    worst = max(worst, abs(decompose(moved).F - base))
    return worst


# rescaling -------------------------------------------------------------------
def scale_step(lattice, params, A_tilde=None, rep=None):
    """Rebuild the rescaled operators on the spacing-``1/L`` lattice and compare.

    Returns ``{name: max-entry residual}`` for ``Q, G1, H1, Delta1, S1,
    H1(A), D1`` plus the coupling ratio check.
    """
    if lattice.spacing_exp != 0:
        raise ValueError("scale_step expects the unit lattice")
    L = lattice.L
    rep = rep or CliffordRep(params.wilson_r)
    At = BondField(lattice) if A_tilde is None else A_tilde
    bk = build_boson_kit(lattice, params)
    fk = build_fermion_kit(lattice, params, At, rep)
    fine = lattice.to_spacing(1)
    mu1, m1, a = L * params.mu0, L * params.m0, params.a
    e1 = np.sqrt(L) * params.e0
    # field on the scaled lattice: A_1 = L^{1/2} A_tilde index-wise
    _, A1vals = scale_field_up(lattice, At.values)
    A1 = BondField(fine, A1vals)
    out = {}
    Qs = average_boson(fine)
    QsT = average_boson_T(fine)
    out["Q"] = float(abs(Qs - bk.Q).max())
    g1_inv = laplacian_matrix(fine, mu1 ** 2) + a * (QsT @ Qs)
    G1 = Factorized(g1_inv).inverse()
    out["G1"] = float(np.abs(G1 - bk.C / L ** 2).max())
    calH1 = a * G1 @ QsT.toarray()
    out["H1"] = float(np.abs(calH1 - bk.H1).max())
    Delta1 = a * np.eye(Qs.shape[0]) - a * a * (Qs @ G1 @ QsT.toarray())
    out["Delta1"] = float(np.abs(Delta1 - L ** 2 * bk.delta_tilde1).max())
    D1 = dirac_matrix(fine, A1, e1, rep)
    qp = average_fermion(fine, A1, e1)
    qmT = average_fermion_T(fine, -A1, e1)
    s1_inv = D1 + m1 * sp.identity(D1.shape[0]) + a * (qmT @ qp)
    S1 = Factorized(s1_inv).inverse()
    out["S1"] = float(np.abs(S1 - fk.gamma / L).max())
    calH1A = a * S1 @ qmT.toarray()
    out["H1(A)"] = float(np.abs(calH1A - fk.H).max())
    calD1 = a * np.eye(qp.shape[0]) - a * a * (qp @ S1 @ qmT.toarray())
    out["D1"] = float(np.abs(calD1 - L * fk.d_tilde1).max())
    out["e1/e0"] = abs(e1 / params.e0 - np.sqrt(L)) if params.e0 else 0.0
    return out


def scale_field_up(lattice, values):
    """``A_1 = L^{1/2} A`` index-wise: the boson field seen on the spacing-``1/L`` lattice."""
    return lattice.to_spacing(1), np.sqrt(lattice.L) * np.asarray(values)


def background_consistency(lattice, params, A1_coarse):
    """``A_tilde = H1 A_{1,L}`` against ``calA_{1,L}`` with ``calA_1 = calH1 A_1``."""
    L = lattice.L
    bk = build_boson_kit(lattice, params)
    A1L = np.asarray(A1_coarse) / np.sqrt(L)
    A_tilde = bk.apply_H1(A1L)
    fine = lattice.to_spacing(1)
    Qs, QsT = average_boson(fine), average_boson_T(fine)
    g1 = Factorized(laplacian_matrix(fine, (L * params.mu0) ** 2) + params.a * (QsT @ Qs))
    cal_A1 = params.a * g1.solve(QsT @ np.asarray(A1_coarse).T).T
    return float(np.abs(cal_A1 / np.sqrt(L) - A_tilde).max())
