"""Second-order perturbation theory: vertices, self-energy, counterterms, P_Theta.

Conventions
-----------
* Vertices are exact derivatives of the hopping phases: the ``n``-th
  derivative in ``A_mu(z)`` of the forward entry ``D(z, z + e_mu)`` is
  ``(i e0 spacing)**n`` times the entry, of the backward entry
  ``(-i e0 spacing)**n`` times it.
* Wick ordering subtracts the free expectation,
  ``:Psibar dm Psi:_S = Psibar dm Psi + tr(dm S(x, x))`` since
  ``<Psibar_a Psi_b>_S = -S_ba``.
* The potential ``V**`` on a region ``Theta`` is a bilinear
  ``sum_ij K_ij B_i F_j`` in ``B = (etabar, Psibar0)`` and ``F = (eta, Psi0)``;
  ``eta, etabar`` are a few auxiliary generators carrying the dressed
  external field ``Psi~ = phi eta`` (and ``M Psi~ = phi1 eta``).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grassmann import GeneratorSet, GrassmannElement
from .lattice import BondField, TorusLattice, _wrap, block_path_incidence
from .linalg import DENSE_LIMIT
from .operators import (CliffordRep, _bond_phases, average_fermion, dirac_matrix,
                        laplacian_matrix, spinor_indices)


class VertexOrderError(ValueError):
    pass


class IncompatibleLattices(ValueError):
    pass


# vertices -----------------------------------------------------------------
@dataclass
class Vertex:
    """``V^(n)_mu(z, x, x')``: n-th derivative of ``D_e0(A, x, x')`` in ``A_mu(z)``.

    Only the two hopping entries of the bond ``(z, z + e_mu)`` are non-zero,
    so the kernel is diagonal in the bond labels (``diagonal`` is always true
    for the Dirac operator).
    """

    order: int
    e0: float
    lattice: TorusLattice
    rep: CliffordRep
    A: np.ndarray | None = None
    antiperiodic: bool = True
    diagonal: bool = True

    def __post_init__(self):
        if self.order not in (1, 2, 3):
            raise VertexOrderError(f"vertex order must be 1, 2 or 3, got {self.order}")

    def _factors(self):
        c = 1j * self.e0 * self.lattice.spacing
        return c ** self.order, (-c) ** self.order

    def blocks(self, mu):
        """Forward and backward 4x4 blocks for every bond ``(x, x + e_mu)``."""
        lat = self.lattice
        ph = _bond_phases(lat, self.A, self.e0, self.antiperiodic)[mu]
        ff, fb = self._factors()
        fwd = (ff * ph)[:, None, None] * self.rep.hop(mu, 1)[None] / lat.spacing
        bwd = (fb * np.conj(ph))[:, None, None] * self.rep.hop(mu, -1)[None] / lat.spacing
        return fwd, bwd

    def kernel(self, mu, z):
        """``{(x, x'): 4x4}`` for the single bond ``(z, z + e_mu)``."""
        fwd, bwd = self.blocks(mu)
        f = int(self.lattice.forward(mu)[z])
        return {(int(z), f): fwd[z], (f, int(z)): bwd[z]}

    def matrix(self, coeffs, sides=(1, -1)):
        """Sparse ``sum_b coeffs_b V_b`` on spinor fields.

        ``sides`` selects the forward (+1) and/or backward (-1) hops.
        """
        lat = self.lattice
        coeffs = np.asarray(coeffs)
        sites = np.arange(lat.nsites)
        rows, cols, vals = [], [], []
        for mu in range(3):
            fwd, bwd = self.blocks(mu)
            f = lat.forward(mu)
            w = coeffs[mu][:, None, None]
            if 1 in sides:
                rows.append(sites), cols.append(f), vals.append(w * fwd)
            if -1 in sides:
                rows.append(f), cols.append(sites), vals.append(w * bwd)
        return _block_sparse(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                             lat.nsites)


def vertex(n, e0, rep=None, lattice=None, A=None, antiperiodic=True):
    rep = rep or CliffordRep()
    if lattice is None:
        lattice = TorusLattice(3, 3)
    return Vertex(n, e0, lattice, rep, A, antiperiodic)


def _block_sparse(r, c, blocks, nsites):
    a = np.arange(4)
    rows = 4 * r[:, None, None] + a[None, :, None] + 0 * a[None, None, :]
    cols = 4 * c[:, None, None] + a[None, None, :] + 0 * a[None, :, None]
    m = sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(4 * nsites, 4 * nsites))
    m.sum_duplicates()
    return m


def vertex_fd_check(lattice, e0, rep, rng, eps=(1e-2, 5e-3, 2.5e-3)):
    """Central differences of ``D(eps A)`` against ``V^(1)[A]``.

    Returns ``(errors, orders)``; the error should fall like ``eps**2``.
    """
    A = rng.standard_normal((3, lattice.nsites))
    lin = vertex(1, e0, rep, lattice).matrix(A)
    errs = []
    for h in eps:
        d = (dirac_matrix(lattice, h * A, e0, rep) - dirac_matrix(lattice, -h * A, e0, rep)) / (2 * h)
        errs.append(float(abs(d - lin).max()))
    orders = [math.log(errs[i] / errs[i + 1]) / math.log(eps[i] / eps[i + 1])
              for i in range(len(eps) - 1)]
    return errs, orders


# free propagators -------------------------------------------------------------
def free_fermion_kernel(lattice, m, rep, antiperiodic=True):
    """Matrix entries of ``(D(0) + m)^(-1)`` by FFT.

    Returns ``s`` of shape ``(n, n, n, 4, 4)`` with
    ``S[x, y] = s[(x - y) mod n]`` times ``-1`` for each axis on which
    ``x - y`` is negative (anti-periodic case).
    """
    n, eta, r = lattice.side, lattice.spacing, rep.wilson_r
    k1 = 2 * np.pi * (np.arange(n) + (0.5 if antiperiodic else 0.0)) / n
    K = np.meshgrid(k1, k1, k1, indexing="ij")
    Dk = np.zeros((n, n, n, 4, 4), dtype=complex)
    eye = np.eye(4)
    for mu in range(3):
        Dk += r * np.cos(K[mu])[..., None, None] * eye + 1j * np.sin(K[mu])[..., None, None] * rep.gamma[mu]
    Dk = (Dk - 3 * r * eye) / eta + m * eye
    s = np.fft.ifftn(np.linalg.inv(Dk), axes=(0, 1, 2))
    if antiperiodic:
        d = np.arange(n)
        tw = np.exp(1j * np.pi * (d[:, None, None] + d[None, :, None] + d[None, None, :]) / n)
        s = s * tw[..., None, None]
    return s


def free_boson_kernel(lattice, mu2):
    """Entries ``c[(x - y) mod n]`` of ``(-Delta + mu2)^(-1)`` (periodic)."""
    n, eta = lattice.side, lattice.spacing
    k1 = 2 * np.pi * np.arange(n) / n
    K = np.meshgrid(k1, k1, k1, indexing="ij")
    lap = sum(2 - 2 * np.cos(k) for k in K) / eta ** 2
    return np.fft.ifftn(1.0 / (lap + mu2)).real


def kernel_at(arr, d, antiperiodic):
    """Lifted kernel value at integer displacements ``d`` (shape ``(..., 3)``)."""
    n = arr.shape[0]
    d = np.asarray(d)
    q, r = np.divmod(d, n)
    out = arr[r[..., 0], r[..., 1], r[..., 2]]
    if antiperiodic:
        sign = np.where(q.sum(axis=-1) % 2, -1.0, 1.0)
        out = out * sign.reshape(sign.shape + (1,) * (out.ndim - sign.ndim))
    return out


def dense_free_fermion(lattice, m, rep):
    n4 = 4 * lattice.nsites
    return np.linalg.inv(dirac_matrix(lattice, None, 0.0, rep).toarray() + m * np.eye(n4))


def dense_free_boson(lattice, mu2):
    return np.linalg.inv(laplacian_matrix(lattice, mu2).toarray())


# self-energy ---------------------------------------------------------------
def _image_signs(lattice):
    """``(-1)^(wraps)`` relating the matrix entry at ``(x, y)`` to the minimal image."""
    c = np.asarray(lattice.coords)
    dx = c[:, None, :] - c[None, :, :]
    q = (_wrap(dx, lattice.side) - dx) // lattice.side
    return np.where(np.abs(q).sum(axis=-1) % 2, -1.0, 1.0)


@dataclass
class Sigma0:
    """Self-energy as the lifted kernel ``g(d)`` on the displacement box.

    ``g`` has shape ``(n, n, n, 4, 4)`` indexed by ``d mod n`` and holds the
    minimal-image value.  ``matrix`` (dense, ``4N x 4N``) is present when it
    was assembled directly.
    """

    lattice: TorusLattice
    g: np.ndarray
    matrix: np.ndarray | None = None

    def block(self, x, y):
        if self.matrix is not None:
            return self.matrix[4 * x:4 * x + 4, 4 * y:4 * y + 4]
        lat = self.lattice
        dx = lat.coords[x] - lat.coords[y]
        return kernel_at(self.g, dx, True)

    def decay(self):
        """``(distances, max |Sigma0|)`` per Euclidean distance shell."""
        c = np.asarray(self.lattice.coords)
        d = np.linalg.norm(_wrap(c, self.lattice.side), axis=1)
        vals = np.abs(self.g.reshape(-1, 16)).max(axis=1)
        shells = np.unique(np.round(d, 9))
        return shells, np.array([vals[np.isclose(d, s)].max() for s in shells])


def sigma0_kernel(lattice, params, rep=None, m0=None, mu0=None, e0=None):
    """``Sigma0`` from translation-invariant kernels (any torus size)."""
    rep = rep or CliffordRep(params.wilson_r)
    e0 = params.e0 if e0 is None else e0
    m0 = params.m0 if m0 is None else m0
    mu0 = params.mu0 if mu0 is None else mu0
    n = lattice.side
    s = free_fermion_kernel(lattice, m0, rep)
    c = free_boson_kernel(lattice, mu0 ** 2)
    d = _wrap(np.asarray(lattice.coords), n)
    g = np.zeros((lattice.nsites, 4, 4), dtype=complex)
    ce = 1j * e0 * lattice.spacing
    for mu in range(3):
        e = np.zeros(3, dtype=np.int64)
        e[mu] = 1
        for sg in (1, -1):
            vs = sg * ce * rep.hop(mu, sg) / lattice.spacing
            z = d - (e if sg < 0 else 0)
            for tau in (1, -1):
                vt = tau * ce * rep.hop(mu, tau) / lattice.spacing
                w = -e if tau > 0 else 0 * e
                prop = kernel_at(s, d + (sg + tau) * e, True)
                cz = kernel_at(c, z - w, False)
                g += cz[:, None, None] * (vs[None] @ prop @ vt[None])
            # tadpole at d = -sg e
            idx = lattice.index(-sg * e)
            g[idx] += -(e0 * lattice.spacing) ** 2 * rep.hop(mu, sg) / lattice.spacing * c[0, 0, 0]
    return Sigma0(lattice, g.reshape(n, n, n, 4, 4))


def sigma0(lattice, params, rep=None, dense=None):
    """``Sigma0(x, y)`` with both diagram terms.

    For lattices within the dense limit the full matrix
    ``sum (V_s S V_t) o C(z_s(x), w_t(y)) + V^(2) C(z, z)`` is assembled from
    dense free propagators; otherwise only the kernel route is used.
    """
    rep = rep or CliffordRep(params.wilson_r)
    dense = 4 * lattice.nsites <= DENSE_LIMIT if dense is None else dense
    if not dense:
        return sigma0_kernel(lattice, params, rep)
    e0 = params.e0
    S = dense_free_fermion(lattice, params.m0, rep)
    C = dense_free_boson(lattice, params.mu0 ** 2)
    v1 = vertex(1, e0, rep, lattice)
    v2 = vertex(2, e0, rep, lattice)
    sites = np.arange(lattice.nsites)
    out = np.zeros_like(S)
    for mu in range(3):
        sel = np.zeros((3, lattice.nsites))
        sel[mu] = 1.0
        bwd = lattice.backward(mu)
        base = {1: sites, -1: bwd}            # bond of the hop x -> x + s e_mu
        end = {1: bwd, -1: sites}             # bond of the hop y' -> y
        for sg in (1, -1):
            Vs = v1.matrix(sel, sides=(sg,))
            left = (Vs @ S)
            for tau in (1, -1):
                Vt = v1.matrix(sel, sides=(tau,))
                cz = C[np.ix_(base[sg], end[tau])]
                out += (Vt.T @ left.T).T * np.kron(cz, np.ones((4, 4)))
            V2 = v2.matrix(sel, sides=(sg,)).toarray()
            out += V2 * np.repeat(np.diag(C)[base[sg]], 4)[:, None]
    # lifted kernel from the column y = 0
    col = out[:, 0:4].reshape(lattice.nsites, 4, 4)
    sign = _image_signs(lattice)[:, 0]
    n = lattice.side
    return Sigma0(lattice, (sign[:, None, None] * col).reshape(n, n, n, 4, 4), out)


def sigma0_bruteforce(lattice, params, pairs, rep=None):
    """Explicit nested sums for ``Sigma0(x, y)`` at the given site pairs.

    Vertices are extracted from ``dirac_matrix`` itself: with ``A = t`` on a
    single bond, ``X = D(pi/2e) - D(0)`` and ``Y = D(pi/e) - D(0)`` give
    ``V^(1) = e (X - Y/2)`` and ``V^(2) = e^2 Y / 2``.
    """
    rep = rep or CliffordRep(params.wilson_r)
    e0 = params.e0
    N = lattice.nsites
    S = dense_free_fermion(lattice, params.m0, rep)
    C = dense_free_boson(lattice, params.mu0 ** 2)
    D0 = dirac_matrix(lattice, None, e0, rep)
    cache = {}

    def bond_vertices(mu, z):
        if (mu, z) not in cache:
            A = np.zeros((3, N))
            A[mu, z] = np.pi / (2 * e0)
            X = dirac_matrix(lattice, A, e0, rep) - D0
            A[mu, z] = np.pi / e0
            Y = dirac_matrix(lattice, A, e0, rep) - D0
            cache[(mu, z)] = (_site_blocks(e0 * (X - Y / 2)), _site_blocks(e0 ** 2 * Y / 2))
        return cache[(mu, z)]

    def bonds_touching(x):
        return [(mu, z) for mu in range(3) for z in (x, int(lattice.backward(mu)[x]))]

    out = {}
    for x, y in pairs:
        total = np.zeros((4, 4), dtype=complex)
        for (mu, z) in bonds_touching(x):
            V1z, V2z = bond_vertices(mu, z)
            for (nu, w) in bonds_touching(y):
                if nu != mu:
                    continue
                V1w, _ = bond_vertices(nu, w)
                for xp in range(N):
                    a = V1z.get((x, xp))
                    if a is None:
                        continue
                    for yp in range(N):
                        b = V1w.get((yp, y))
                        if b is None:
                            continue
                        total += a @ S[4 * xp:4 * xp + 4, 4 * yp:4 * yp + 4] @ b * C[z, w]
            if (x, y) in V2z:
                total += V2z[(x, y)] * C[z, z]
        out[(x, y)] = total
    return out


def _site_blocks(m):
    """``{(x, y): 4x4}`` for the non-zero site blocks of a sparse spinor matrix."""
    m = m.tocoo()
    out = {}
    for r, c, v in zip(m.row, m.col, m.data):
        if v == 0:
            continue
        key = (int(r) // 4, int(c) // 4)
        if key not in out:
            out[key] = np.zeros((4, 4), dtype=complex)
        out[key][r % 4, c % 4] += v
    return out


def self_contraction_traces(lattice, params, rep=None):
    """``sum_{w w'} tr(V^(1)_mu(z, w, w') S(w', w))`` for every bond."""
    rep = rep or CliffordRep(params.wilson_r)
    s = free_fermion_kernel(lattice, params.m0, rep)
    v = vertex(1, params.e0, rep, lattice)
    out = np.zeros((3, lattice.nsites), dtype=complex)
    for mu in range(3):
        fwd, bwd = v.blocks(mu)
        e = np.zeros(3, dtype=np.int64)
        e[mu] = 1
        # lifted values: the hop z -> z + e meets S(z + e, z) = s(e), the
        # reverse hop meets s(-e); the wrap signs of blocks and entries cancel
        sgn = np.where(lattice.wraps(mu), -1.0, 1.0)[:, None, None]
        out[mu] = (np.einsum("zab,ba->z", fwd * sgn, kernel_at(s, e, True))
                   + np.einsum("zab,ba->z", bwd * sgn, kernel_at(s, -e, True)))
    return out


# counterterms -------------------------------------------------------------
def delta_E0(slots, L, N, M):
    """``sum_j dE_j L^(3(N+M-j))`` over supplied slots, or ``None``."""
    if not slots or all(v is None for v in slots):
        return None
    return sum(float(v) * float(L) ** (3 * (N + M - j)) for j, v in enumerate(slots) if v is not None)


@dataclass
class CountertermReport:
    sigma: Sigma0
    dm0: np.ndarray
    scalar_part: complex
    nonscalar_residual: float
    spread: float
    conjugation_residual: float | None
    self_trace: float
    wick_residual: float
    dE0_slots: list = field(default_factory=list)

    def summary(self):
        return {
            "dm0_real": self.dm0.real.tolist(), "dm0_imag": self.dm0.imag.tolist(),
            "scalar_part": [self.scalar_part.real, self.scalar_part.imag],
            "nonscalar_residual": self.nonscalar_residual, "spread": self.spread,
            "conjugation_residual": self.conjugation_residual,
            "self_trace": self.self_trace, "wick_residual": self.wick_residual,
            "dE0_slots": self.dE0_slots,
        }


def dm0_field(sig):
    """``dm0(x) = -sum_y (-1)^(wraps) Sigma0(x, y)`` at every ``x`` (needs the matrix)."""
    lat = sig.lattice
    N = lat.nsites
    M = sig.matrix.reshape(N, 4, N, 4)
    sign = _image_signs(lat)
    return -np.einsum("xy,xayb->xab", sign, M)


def wick_subtraction_residual(dm, S_xx):
    """``int :Psibar dm Psi:_S dmu_S`` evaluated in the Grassmann algebra (one site)."""
    from .grassmann import CovarianceData, gaussian_integral
    gens = GeneratorSet.from_sites([0], spinors=4)
    terms = {(4 + a, b): dm[a, b] for a in range(4) for b in range(4)}
    F = GrassmannElement.from_terms(gens, terms)
    cov = CovarianceData(S_xx, gens.select(0, 0), gens.select(0, 1))
    return abs(gaussian_integral(F, cov) + np.trace(dm @ S_xx))


def dm0(sig, params, rep=None, dE0_slots=()):
    rep = rep or CliffordRep(params.wilson_r)
    lat = sig.lattice
    d = -sig.g.reshape(-1, 4, 4).sum(axis=0)
    scalar = complex(np.trace(d) / 4)
    nonscalar = float(np.abs(d - scalar * np.eye(4)).max())
    ref = max(float(np.abs(d).max()), 1e-300)
    spread = 0.0
    conj = None
    if sig.matrix is not None:
        field_ = dm0_field(sig)
        spread = float(np.abs(field_ - field_[0]).max()) / ref
        M = sig.matrix.reshape(lat.nsites, 4, lat.nsites, 4)
        lhs = np.einsum("ba,xbyc,cd->xayd", rep.conj, M, rep.conj)
        conj = float(np.abs(lhs - M.transpose(2, 3, 0, 1)).max())
    traces = self_contraction_traces(lat, params, rep)
    s = free_fermion_kernel(lat, params.m0, rep)
    wick = wick_subtraction_residual(d, s[0, 0, 0])
    return CountertermReport(sig, d, scalar, nonscalar, spread, conj,
                             float(np.abs(traces).max()), float(wick), list(dE0_slots))


def dm0_ladder(params, sides=(9, 27), L=3, rep=None):
    """Scalar part of ``dm0`` across torus sizes (kernel route)."""
    rep = rep or CliffordRep(params.wilson_r)
    out = []
    for n in sides:
        lat = TorusLattice(n, L)
        d = -sigma0_kernel(lat, params, rep).g.reshape(-1, 4, 4).sum(axis=0)
        out.append((n, complex(np.trace(d) / 4)))
    return out


# the region Theta -----------------------------------------------------------
@dataclass
class ThetaRegion:
    """Union of ``L``-blocks; bonds are those with both ends inside."""

    lattice: TorusLattice
    blocks: np.ndarray
    sites: np.ndarray
    mask: np.ndarray
    bond_mu: np.ndarray
    bond_x: np.ndarray

    @property
    def nbonds(self):
        return self.bond_mu.size

    def bond_columns(self):
        return self.bond_mu * self.lattice.nsites + self.bond_x


def theta_region(lattice, blocks):
    blocks = np.unique(np.asarray(blocks, dtype=np.int64))
    nc = (lattice.side // lattice.L) ** 3
    if blocks.size == 0 or blocks.min() < 0 or blocks.max() >= nc:
        raise ValueError(f"block labels must lie in [0, {nc})")
    mask = np.isin(lattice.block_labels, blocks)
    mus, xs = [], []
    for mu in range(3):
        ok = mask & mask[lattice.forward(mu)]
        xs.append(np.flatnonzero(ok))
        mus.append(np.full(xs[-1].size, mu))
    return ThetaRegion(lattice, blocks, np.flatnonzero(mask), mask,
                       np.concatenate(mus), np.concatenate(xs))


@dataclass
class DressedKernels:
    """``Psi~ = phi eta``, ``Psibar~ = phib etabar``, ``M Psi~ = phi1 eta``, ``Mbar Psibar~ = phib1 etabar``."""

    phi: np.ndarray
    phib: np.ndarray
    phi1: np.ndarray
    phib1: np.ndarray

    @property
    def m(self):
        return self.phi.shape[1]

    @classmethod
    def random(cls, region, m, rng, scale=0.3):
        n = 4 * region.sites.size
        nc = 4 * region.blocks.size

        def z(*shape):
            return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        return cls(z(n, m), z(n, m), z(nc, m), z(nc, m))


class ThetaPotential:
    """``V**_Theta`` as a bilinear in ``(B, F)`` with exact ``A0`` derivatives.

    ``K(A0) = wc k Ubar^T U + wf Xbar^T D(A~ + A0) X - K(0)`` with
    ``U = Phi1 - Q(A~ + A0) X`` and ``X = [phi | I]``.  ``Q(A~ + A0)`` equals
    ``Q(A~) diag(exp(i e0 spacing inc A0))``; ``inc`` is the block path
    incidence restricted to ``Theta``.
    """

    def __init__(self, region, params, kernels, A_tilde=None, rep=None):
        lat = region.lattice
        self.region, self.params, self.kernels = region, params, kernels
        self.rep = rep or CliffordRep(params.wilson_r)
        self.e0 = params.e0
        N = lat.nsites
        At = np.zeros((3, N)) if A_tilde is None else (
            A_tilde.values if isinstance(A_tilde, BondField) else np.asarray(A_tilde, dtype=float))
        self.A_tilde = At
        m = kernels.m
        self.m = m
        sidx = spinor_indices(region.sites)
        cidx = spinor_indices(region.blocks)
        n = sidx.size
        self.n = n
        self.Q = average_fermion(lat, At, self.e0)[cidx][:, sidx].toarray()
        self.Qb = average_fermion(lat, -At, self.e0)[cidx][:, sidx].toarray()
        inc = block_path_incidence(lat)
        full = inc[region.sites]
        sub = full[:, region.bond_columns()]
        if abs(abs(full).sum() - abs(sub).sum()) > 0:
            raise ValueError("block paths leave Theta")
        self.inc = np.repeat(sub.toarray(), 4, axis=0)          # (n, nb)
        self.X = np.hstack([kernels.phi, np.eye(n)])
        self.Xb = np.hstack([kernels.phib, np.eye(n)])
        self.Phi1 = np.hstack([kernels.phi1, np.zeros((cidx.size, n))])
        self.Phib1 = np.hstack([kernels.phib1, np.zeros((cidx.size, n))])
        cl = lat.coarse()
        self.wc, self.wf = cl.volume_weight, lat.volume_weight
        self.k = params.a / lat.L
        self.c1 = 1j * self.e0 * lat.spacing
        self.U = self.Phi1 - self.Q @ self.X
        self.Ub = self.Phib1 - self.Qb @ self.Xb
        self._QbU = self.Qb.T @ self.U
        self._UbQ = self.Ub.T @ self.Q
        self._QbQ = self.Qb.T @ self.Q
        # hopping blocks of the Theta bonds
        pos = -np.ones(N, dtype=np.int64)
        pos[region.sites] = np.arange(region.sites.size)
        self._pos = pos
        ph = _bond_phases(lat, At, self.e0, True)
        self._hops = []
        for mu, x in zip(region.bond_mu, region.bond_x):
            y = int(lat.forward(mu)[x])
            f = ph[mu, x] * self.rep.hop(mu, 1) / lat.spacing
            b = np.conj(ph[mu, x]) * self.rep.hop(mu, -1) / lat.spacing
            self._hops.append((pos[x], pos[y], f, b))
        self._K0 = self._evaluate(np.zeros(region.nbonds))

    # exact evaluation ------------------------------------------------------
    def _evaluate(self, a0):
        lat, reg = self.region.lattice, self.region
        R = np.exp(self.c1 * (self.inc @ a0))
        U = self.Phi1 - (self.Q * R[None, :]) @ self.X
        Ub = self.Phib1 - (self.Qb * np.conj(R)[None, :]) @ self.Xb
        full = self.A_tilde.copy()
        full[reg.bond_mu, reg.bond_x] += a0
        D = dirac_matrix(lat, full, self.e0, self.rep, mask=reg.mask).toarray()
        return self.wc * self.k * Ub.T @ U + self.wf * self.Xb.T @ D @ self.X

    def matrix(self, a0):
        """``K(A0)`` for ``A0`` given on the bonds of ``Theta``."""
        return self._evaluate(np.asarray(a0, dtype=float)) - self._K0

    # derivatives at A0 = 0 -----------------------------------------------------
    def _dirac_derivative(self, b, order):
        i, j, f, bk = self._hops[b]
        out = np.zeros((self.n, self.n), dtype=complex)
        out[4 * i:4 * i + 4, 4 * j:4 * j + 4] = self.c1 ** order * f
        out[4 * j:4 * j + 4, 4 * i:4 * i + 4] = (-self.c1) ** order * bk
        return self.Xb.T @ out @ self.X

    def first(self, b):
        """``dK / dA0_b``."""
        w = self.inc[:, b]
        q = self.wc * self.k * self.c1 * ((self.Xb * w[:, None]).T @ self._QbU
                                          - self._UbQ @ (self.X * w[:, None]))
        return q + self.wf * self._dirac_derivative(b, 1)

    def second(self, b, bp):
        """``d^2 K / dA0_b dA0_b'``."""
        wb, wp = self.inc[:, b], self.inc[:, bp]
        e2 = -self.c1 ** 2
        ww = wb * wp
        q = e2 * self.wc * self.k * ((self.Xb * ww[:, None]).T @ self._QbU
                                     + (self.Xb * wb[:, None]).T @ self._QbQ @ (self.X * wp[:, None])
                                     + (self.Xb * wp[:, None]).T @ self._QbQ @ (self.X * wb[:, None])
                                     + self._UbQ @ (self.X * ww[:, None]))
        if b == bp:
            q = q + self.wf * self._dirac_derivative(b, 2)
        return q

    def second_contracted(self, c):
        """``sum_{b b'} c_{b b'} d^2 K / dA0_b dA0_b'`` via ``Chat = inc c inc^T``."""
        Ch = self.inc @ c @ self.inc.T
        dg = np.diag(Ch)
        e2 = -self.c1 ** 2
        q = e2 * self.wc * self.k * ((self.Xb * dg[:, None]).T @ self._QbU
                                     + 2 * self.Xb.T @ (self._QbQ * Ch) @ self.X
                                     + self._UbQ @ (self.X * dg[:, None]))
        for b in range(self.region.nbonds):
            if c[b, b] != 0:
                q = q + self.wf * c[b, b] * self._dirac_derivative(b, 2)
        return q

    def second_pairs(self):
        """Bond pairs with a possibly non-zero second derivative."""
        nz = [set(np.flatnonzero(self.inc[:, b])) for b in range(self.region.nbonds)]
        labels = self.region.lattice.block_labels[self.region.sites]
        blk = [set(labels[np.array(sorted(s)) // 4]) if s else set() for s in nz]
        pairs = []
        for b in range(self.region.nbonds):
            for bp in range(self.region.nbonds):
                if b == bp or (blk[b] & blk[bp]):
                    pairs.append((b, bp))
        return pairs

    def counterterm(self, dm):
        """Bilinear of ``sum_x (Psibar~ + Psibar0) dm (Psi~ + Psi0)`` on ``Theta``."""
        ns = self.region.sites.size
        return self.Xb.T @ np.kron(np.eye(ns), dm) @ self.X

    def support_violations(self):
        """Entries of the internal vertex blocks outside the allowed support.

        Allowed: both spinor sites in the block of the bond, or the two bond ends.
        """
        lat = self.region.lattice
        labels = lat.block_labels[self.region.sites]
        bad = 0
        for b, (mu, x) in enumerate(zip(self.region.bond_mu, self.region.bond_x)):
            K00 = self.first(b)[self.m:, self.m:]
            r, c = np.nonzero(np.abs(K00) > 0)
            sr, sc = r // 4, c // 4
            ends = {self._pos[x], self._pos[lat.forward(mu)[x]]}
            same_block = (labels[sr] == labels[sc]) & (labels[sr] == lat.block_labels[x])
            bond = np.array([a in ends and bb in ends for a, bb in zip(sr, sc)], dtype=bool)
            bad += int(np.count_nonzero(~(same_block | bond)))
        return bad


# Grassmann helpers ------------------------------------------------------------
def external_generators(m):
    """``eta_0..eta_{m-1}`` (unbarred) then ``etabar_0..``."""
    return GeneratorSet([(0, 0, i, 0) for i in range(m)] + [(0, 1, i, 0) for i in range(m)])


def bilinear_element(gens, M):
    """``sum_ij M_ij etabar_i eta_j``."""
    m = M.shape[0]
    return GrassmannElement.from_terms(gens, {(m + i, j): M[i, j] for i in range(m)
                                              for j in range(m) if M[i, j] != 0})


def unbar_bar_element(gens, M):
    """``sum_ij M_ij eta_j etabar_i`` (unbarred factor written first)."""
    m = M.shape[0]
    return GrassmannElement.from_terms(gens, {(j, m + i): M[i, j] for i in range(m)
                                              for j in range(m) if M[i, j] != 0})


# diagram formula ----------------------------------------------------------------
@dataclass
class PThetaData:
    """Vertices, propagators and counterterm inputs of the second-order formula.

    ``J1[b] = K_b[ee]``; ``Kbar1[b] = K_b[e0]`` (right derivative in Psi0);
    ``K1[b] = K_b[0e]`` (left derivative in Psibar0); ``L1[b] = -K_b[00]``
    (left derivatives).  Second-order vertices are kept per bond pair, the
    internal one already traced against ``Gamma``.
    """

    m: int
    c: np.ndarray              # photon covariance on Theta bonds
    Gamma: np.ndarray          # fermion covariance on Theta spinors
    J1: np.ndarray
    Kbar1: np.ndarray
    K1: np.ndarray
    L1: np.ndarray
    pairs: list
    J2: np.ndarray
    L2_trace: np.ndarray       # tr(L2_{b b'} Gamma) per pair
    dm: np.ndarray
    ct_external: np.ndarray    # phib^T (I x dm) phi
    S_hat_diag: np.ndarray     # free propagator S(x, x)
    volume: float              # |Theta| as a volume
    dE: float = 0.0
    L: int = 3
    nsites: int = 0


@dataclass
class DiagramTerms:
    terms: dict

    def total(self):
        out = None
        for v in self.terms.values():
            out = v if out is None else out + v
        return out


def diagram_formula(data, scales=None):
    """Seven-term second-order formula plus the two fermion-tadpole terms.

    ``scales`` maps the bookkeeping factors of the scaled formula:
    ``{'J': f(n), 'K': f(n), 'L': f(n), 'G': g, 'S': s, 'pre6', 'pre4', 'pre3', 'dm', 'dE', 'vol'}``.
    """
    sc = scales or {}
    fJ = sc.get("J", lambda n: 1.0)
    fK = sc.get("K", lambda n: 1.0)
    fL = sc.get("L", lambda n: 1.0)
    g, s = sc.get("G", 1.0), sc.get("S", 1.0)
    p6, p4, p3 = sc.get("pre6", 1.0), sc.get("pre4", 1.0), sc.get("pre3", 1.0)
    m = data.m
    gens = external_generators(m)
    G = g * data.c
    Gam = s * data.Gamma
    J1 = fJ(1) * data.J1
    Kb = fK(1) * data.Kbar1
    K1 = fK(1) * data.K1
    L1 = fL(1) * data.L1
    nb = J1.shape[0]
    ZJ = np.einsum("bc,cij->bij", G, J1)
    terms = {}
    t1 = GrassmannElement(gens)
    for b in range(nb):
        t1 = t1 + bilinear_element(gens, J1[b]) * bilinear_element(gens, ZJ[b])
    terms["photon_line"] = 0.5 * p6 * t1
    pair_c = np.array([G[b, bp] for b, bp in data.pairs])
    J2 = fJ(2) * np.einsum("p,pij->ij", pair_c, data.J2)
    terms["photon_tadpole"] = -0.5 * p4 * bilinear_element(gens, J2)
    ZK = np.einsum("bc,czj->bzj", G, K1)
    ZKb = np.einsum("bc,ciz->biz", G, Kb)
    mix1 = np.einsum("biz,zw,bwj->ij", Kb, Gam, ZK, optimize=True)
    terms["mixed_barK_K"] = 0.5 * p6 * bilinear_element(gens, mix1)
    # K(z) Gamma(w, z) Kbar(w): the unbarred factor comes first
    mix2 = np.einsum("bzj,wz,biw->ij", K1, Gam, ZKb, optimize=True)
    terms["mixed_K_barK"] = -0.5 * p6 * unbar_bar_element(gens, mix2)
    LG = np.einsum("bzw,wv->bzv", L1, Gam)
    ZLG = np.einsum("bc,czv->bzv", G, LG)
    loop = np.einsum("bzv,bvz->", LG, ZLG)
    terms["fermion_loop"] = -0.5 * p6 * loop * GrassmannElement.one(gens)
    L2G = fL(2) * s * (pair_c @ data.L2_trace)
    terms["loop_tadpole"] = -0.5 * p4 * L2G * GrassmannElement.one(gens)
    # fermion tadpoles: <Psibar0 K00 Psi0> = -tr(K00 Gamma) = tr(L1 Gamma)
    tad = np.einsum("bzw,wz->b", L1, Gam)
    terms["tadpole_line"] = 0.5 * p6 * 2 * bilinear_element(gens, np.einsum("b,bij->ij", G @ tad, J1))
    terms["tadpole_pair"] = 0.5 * p6 * (tad @ G @ tad) * GrassmannElement.one(gens)
    dmf = sc.get("dm", 1.0)
    wick = dmf * p3 * s * sum(np.trace(data.dm @ (data.S_hat_diag - data.Gamma[4 * i:4 * i + 4, 4 * i:4 * i + 4]))
                              for i in range(data.nsites))
    ct = dmf * p3 * sc.get("ext", 1.0) * bilinear_element(gens, data.ct_external)
    terms["counterterm"] = -(ct + wick * GrassmannElement.one(gens)) \
        - sc.get("dE", 1.0) * data.dE * sc.get("vol", 1.0) * data.volume * GrassmannElement.one(gens)
    return DiagramTerms(terms)


# Wick engine ---------------------------------------------------------------
def _parity(perm):
    perm = list(perm)
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


class WickEngine:
    """Gaussian expectation over internal generators of products of bilinears.

    A bilinear is ``sum_ij M_ij B_i F_j`` with ``B = (etabar, Psibar0)``,
    ``F = (eta, Psi0)`` and the first ``m`` entries external.  Internal
    fields pair with ``<Psi0_a Psibar0_b> = Gamma_ab`` and
    ``<Psibar0_b Psi0_a> = -Gamma_ab``; every pairing of the internal
    positions is enumerated and signed by the permutation that brings the
    pairs to the front.
    """

    def __init__(self, m, Gamma):
        self.m = m
        self.Gamma = np.asarray(Gamma)
        self.gens = external_generators(m)

    def tensors(self, mats, weight=1.0, acc=None):
        acc = {} if acc is None else acc
        k = len(mats)
        npos = 2 * k
        letters = "abcdefghijklmnop"[:npos]
        m = self.m
        for kinds in itertools.product((0, 1), repeat=npos):      # 0 external, 1 internal
            bars = [p for p in range(0, npos, 2) if kinds[p]]
            unbars = [p for p in range(1, npos, 2) if kinds[p]]
            if len(bars) != len(unbars):
                continue
            ext = [p for p in range(npos) if not kinds[p]]
            ops, subs = [], []
            for i, M in enumerate(mats):
                rs = slice(m, None) if kinds[2 * i] else slice(0, m)
                cs = slice(m, None) if kinds[2 * i + 1] else slice(0, m)
                ops.append(M[rs, cs])
                subs.append(letters[2 * i] + letters[2 * i + 1])
            for match in itertools.permutations(unbars):
                pairs = [tuple(sorted(pq)) for pq in zip(bars, match)]
                order = [p for pq in pairs for p in pq] + ext
                sign = _parity(order)
                pops, psubs = list(ops), list(subs)
                for lo, hi in pairs:
                    bar, unbar = (lo, hi) if lo % 2 == 0 else (hi, lo)
                    # Gamma indexed (unbar, bar); a leading bar costs a sign
                    f = -1.0 if lo % 2 == 0 else 1.0
                    sign *= f
                    pops.append(self.Gamma)
                    psubs.append(letters[unbar] + letters[bar])
                out = "".join(letters[p] for p in ext)
                val = np.einsum(",".join(psubs) + "->" + out, *pops, optimize=True)
                key = tuple(p % 2 for p in ext)
                acc[key] = acc.get(key, 0) + weight * sign * val
        return acc

    def element(self, acc):
        """Grassmann element in ``(eta, etabar)`` from accumulated tensors."""
        m = self.m
        terms = {}
        for key, T in acc.items():
            T = np.asarray(T)
            if T.ndim == 0:
                terms[()] = terms.get((), 0) + complex(T)
                continue
            for idx in itertools.product(range(m), repeat=T.ndim):
                v = T[idx]
                if v == 0:
                    continue
                gidx = tuple(m + i if kind == 0 else i for i, kind in zip(idx, key))
                if len(set(gidx)) < len(gidx):
                    continue
                # from_terms sorts and signs; collect by the sorted tuple
                terms[gidx] = terms.get(gidx, 0) + v
        return GrassmannElement.from_terms(self.gens, terms)

    def expect(self, mats, weight=1.0):
        return self.element(self.tensors(mats, weight))


# P_Theta ------------------------------------------------------------------
@dataclass
class PTheta:
    data: PThetaData
    diagrams: DiagramTerms
    engine: GrassmannElement
    potential: ThetaPotential

    @property
    def value(self):
        return self.diagrams.total()

    def residual(self):
        """``(absolute, relative)`` max coefficient difference, diagrams vs engine."""
        d = self.value.max_diff(self.engine)
        ref = max([abs(c) for c in self.engine.terms.values()] + [1e-300])
        return d, d / ref

    def constant_per_volume(self):
        """Field-independent part of ``P_Theta`` divided by ``|Theta|`` (dE0 candidate)."""
        return self.value.scalar() / self.data.volume


def default_covariances(region, params, A_tilde=None, rep=None):
    """``(C_loc, Gamma_loc)``: the exact kit covariances restricted to ``Theta``."""
    from .rgstep import build_boson_kit, build_fermion_kit
    lat = region.lattice
    bk = build_boson_kit(lat, params)
    fk = build_fermion_kit(lat, params, A_tilde, rep)
    sidx = spinor_indices(region.sites)
    C = np.asarray(bk.C)[np.ix_(region.sites, region.sites)]
    G = np.asarray(fk.gamma)[np.ix_(sidx, sidx)]
    return C, G


def bond_covariance(region, C_sites):
    """``c_{b b'} = delta_{mu mu'} C(x_b, x_b')`` on the bonds of ``Theta``."""
    pos = -np.ones(region.lattice.nsites, dtype=np.int64)
    pos[region.sites] = np.arange(region.sites.size)
    px = pos[region.bond_x]
    same = region.bond_mu[:, None] == region.bond_mu[None, :]
    return np.where(same, C_sites[np.ix_(px, px)], 0.0)


def p_theta(region, params, kernels, A_tilde=None, rep=None, covariances=None,
            dm=None, dE=0.0, S_hat_diag=None):
    """Second-order functional on ``Theta`` by diagrams and by the Wick engine."""
    rep = rep or CliffordRep(params.wilson_r)
    lat = region.lattice
    pot = ThetaPotential(region, params, kernels, A_tilde, rep)
    C_sites, Gamma = covariances or default_covariances(region, params, A_tilde, rep)
    c = bond_covariance(region, C_sites)
    if dm is None:
        dm = np.zeros((4, 4), dtype=complex) if params.e == 0 else dm0(
            sigma0_kernel(lat, params, rep), params, rep).dm0
    if S_hat_diag is None:
        S_hat_diag = free_fermion_kernel(lat, params.m0, rep)[0, 0, 0]
    m = kernels.m
    nb = region.nbonds
    firsts = [pot.first(b) for b in range(nb)]
    J1 = np.array([K[:m, :m] for K in firsts])
    Kb = np.array([K[:m, m:] for K in firsts])
    K1 = np.array([K[m:, :m] for K in firsts])
    L1 = np.array([-K[m:, m:] for K in firsts])
    pairs = pot.second_pairs()
    J2 = np.empty((len(pairs), m, m), dtype=complex)
    L2t = np.empty(len(pairs), dtype=complex)
    for p, (b, bp) in enumerate(pairs):
        K = pot.second(b, bp)
        J2[p] = K[:m, :m]
        L2t[p] = np.sum(-K[m:, m:] * Gamma.T)
    ct_ext = kernels.phib.T @ np.kron(np.eye(region.sites.size), dm) @ kernels.phi
    data = PThetaData(m, c, Gamma, J1, Kb, K1, L1, pairs, J2, L2t, dm, ct_ext, S_hat_diag,
                      float(region.sites.size * lat.volume_weight), dE, lat.L, region.sites.size)
    diagrams = diagram_formula(data)
    engine = wick_evaluation(pot, c, Gamma, dm, S_hat_diag, dE, firsts)
    return PTheta(data, diagrams, engine, pot)


def wick_evaluation(pot, c, Gamma, dm, S_hat_diag, dE, firsts=None):
    """``1/2 int (V'(0)^2 - V''(0))`` with ``V(t) = V**(t A0) + t^2 dV``.

    ``V'(0) = sum_b A0_b G_b``; the photon average is done through the
    eigenvectors of ``c`` so only squares of single bilinears are needed.
    """
    engine = WickEngine(pot.m, Gamma)
    firsts = firsts or [pot.first(b) for b in range(pot.region.nbonds)]
    lam, vec = np.linalg.eigh(c)
    acc = {}
    for k in range(lam.size):
        if lam[k] == 0:
            continue
        Mk = sum(vec[b, k] * firsts[b] for b in range(len(firsts)) if vec[b, k] != 0)
        engine.tensors([Mk, Mk], 0.5 * lam[k], acc)
    N = pot.second_contracted(c) + 2 * pot.counterterm(dm)
    engine.tensors([N], -0.5, acc)
    ns = pot.region.sites.size
    const = ns * np.trace(dm @ S_hat_diag) + dE * ns * pot.region.lattice.volume_weight
    acc[()] = acc.get((), 0) - const
    return engine.element(acc)


# scaling ------------------------------------------------------------------
@dataclass
class ScaledP:
    value: GrassmannElement
    residual: float
    relative: float
    propagator_residuals: dict
    J1_scaled: np.ndarray


def scale_p(pt, params, rep=None, check_propagators=True):
    """Scaled functional on ``L^-1 Theta`` compared with ``P_Theta``.

    Vertices carry ``L^(2 + n/2)``, ``L^(1 + n/2)``, ``L^(n/2)``; the
    propagators are ``G1 = L C`` and ``S1 = L^2 Gamma``; prefactors
    ``L^-6, L^-4, L^-3``; ``dm1 = L dm0``, ``psi1 = L Psi~(L .)``,
    ``dE1' = L^3 dE0`` and ``|S| = L^-3 |Theta|`` as a volume.
    """
    rep = rep or CliffordRep(params.wilson_r)
    data = pt.data
    L = float(data.L)
    scales = {
        "J": lambda n: L ** (2 + n / 2), "K": lambda n: L ** (1 + n / 2), "L": lambda n: L ** (n / 2),
        "G": L, "S": L ** 2, "pre6": L ** -6, "pre4": L ** -4, "pre3": L ** -3,
        "dm": L, "ext": L ** 2, "dE": L ** 3, "vol": L ** -3,
    }
    val = diagram_formula(data, scales).total()
    d = val.max_diff(pt.value)
    ref = max([abs(c) for c in pt.value.terms.values()] + [1e-300])
    props = {}
    if check_propagators:
        lat = pt.potential.region.lattice
        fine = TorusLattice(lat.side, lat.L, lat.spacing_exp + 1)
        m1, mu1 = L * params.m0, L * params.mu0
        s1 = free_fermion_kernel(fine, m1, rep) / fine.volume_weight
        s0 = free_fermion_kernel(lat, params.m0, rep) / lat.volume_weight
        g1 = free_boson_kernel(fine, mu1 ** 2) / fine.volume_weight
        g0 = free_boson_kernel(lat, params.mu0 ** 2) / lat.volume_weight
        props["S1_vs_L2_S0"] = float(np.abs(s1 - L ** 2 * s0).max() / np.abs(s1).max())
        props["G1_vs_L_C0"] = float(np.abs(g1 - L * g0).max() / np.abs(g1).max())
    return ScaledP(val, d, d / ref, props, L ** 2.5 * data.J1)
