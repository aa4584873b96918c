"""Random walk expansions for ``C = Delta_sharp^-1`` and ``Gamma = D_sharp^-1``.

A smooth partition of unity ``sum_j h_j^2 = 1`` on the ``M0``-sublattice
gives the parametrix ``G* = sum_j h_j G_{O_j} h_j`` where ``G_{O_j}`` inverts
the operator restricted to the cube ``O_j = {|x - j| <= M0}``.  Then
``op G* = I - R`` with ``R = sum_j [h_j, op] G_{O_j} h_j`` and
``G = G* sum_n R^n``.  Expanding the products gives a sum over walks
``(j_0, ..., j_n)`` of neighbouring centres.

Everything works on vectors; dense matrices are only formed on request.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linalg import Factorized, SingularOperator
from .rgstep import FermionRGKit


class NotConvergent(RuntimeError):
    pass


class BlockInverseError(np.linalg.LinAlgError):
    """A cube inverse failed; ``centre`` says which one."""

    def __init__(self, centre, msg):
        super().__init__(f"block inverse at centre {tuple(centre)} failed: {msg}")
        self.centre = tuple(centre)


# partition of unity --------------------------------------------------------
def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10 - 15 * u + 6 * u * u)


def bump1d(t):
    """``g(t)``: 1 on ``|t| <= 1/3``, 0 on ``|t| >= 2/3``, ``sum_i g(t-i)^2 = 1``.

    ``g = cos(pi/2 * s(3|t| - 1))`` with the quintic smoothstep ``s``; since
    ``s(1-u) = 1 - s(u)`` the squares of neighbouring translates add to one.
    """
    t = np.abs(np.asarray(t, dtype=float))
    return np.where(t <= 1 / 3, 1.0, np.where(t >= 2 / 3, 0.0,
                                               np.cos(0.5 * np.pi * _smoothstep(3 * t - 1))))


def _periodic_bump(d, M0, side):
    """Per-axis factor of ``h_j`` summed over the periodic images of ``j``."""
    total = np.zeros_like(d, dtype=float)
    reach = int(np.ceil(M0 / side)) + 1
    for k in range(-reach, reach + 1):
        total += bump1d((d + k * side) / M0) ** 2
    return np.sqrt(total)


def partition_of_unity(lattice, M0):
    """Centres ``j`` on the ``M0``-sublattice and ``h_j`` as an array ``(nj, N)``."""
    if lattice.side % M0:
        raise ValueError(f"side {lattice.side} not divisible by M0={M0}")
    nb = lattice.side // M0
    centres = np.indices((nb, nb, nb)).reshape(3, -1).T * M0
    c = lattice.coords
    h = np.empty((len(centres), lattice.nsites))
    for n, j in enumerate(centres):
        d = lattice.displacement(j[None, :], c)
        h[n] = np.prod(_periodic_bump(d, M0, lattice.side), axis=1)
    return centres, h


# the parametrix --------------------------------------------------------------
def _content_key(m):
    m = m.tocsr()
    m.sort_indices()
    hsh = hashlib.sha1()
    for arr in (m.indptr, m.indices, m.data):
        hsh.update(np.ascontiguousarray(arr).tobytes())
    return hsh.hexdigest()


@dataclass
class _Cube:
    sites: np.ndarray      # site indices of O_j (translation-invariant order)
    idx: np.ndarray        # component indices
    solver: Factorized


class Parametrix:
    """The seed of a walk expansion for a boson or fermion kit.

    ``region`` (a boolean site mask) restricts everything to ``[op]_Lambda``
    with ``h_j -> chi_Lambda h_j`` and ``O_j -> O_j cap Lambda``.
    """

    def __init__(self, kit, M0, region=None, cube_radius=None):
        lat = kit.lattice
        self.kit, self.lattice, self.M0 = kit, lat, int(M0)
        self.block = 4 if isinstance(kit, FermionRGKit) else 1
        mask = np.ones(lat.nsites, dtype=bool) if region is None else np.asarray(region, dtype=bool)
        self.mask = mask
        self.cube_radius = self.M0 if cube_radius is None else int(cube_radius)
        centres, h = partition_of_unity(lat, self.M0)
        h = h * mask[None, :]
        keep = np.flatnonzero(h.max(axis=1) > 0)
        self.centres, self.h = centres[keep], h[keep]
        base = kit.delta_sharp if self.block == 1 else kit.d_sharp
        if region is None:
            self.op = base.tocsr()
        else:
            sub = kit.restricted(mask)
            P = sp.csr_matrix((np.ones(sub.idx.size), (sub.idx, np.arange(sub.idx.size))),
                              shape=(sub.size, sub.idx.size))
            self.op = (P @ sub.matrix @ P.T).tocsr()
        self.opH = self.op.conj().T.tocsr()
        self.dtype = complex if self.block > 1 else float
        self._cache = {}
        self.cubes = [self._cube(j) for j in self.centres]

    @property
    def n(self):
        return self.block * self.lattice.nsites

    def _expand(self, f):
        return np.repeat(f, self.block) if self.block > 1 else f

    def hvec(self, k):
        return self._expand(self.h[k])

    def _cube(self, j):
        lat = self.lattice
        d = lat.displacement(j[None, :], lat.coords)
        inside = (np.abs(d).max(axis=1) <= self.cube_radius) & self.mask
        sites = np.flatnonzero(inside)
        dd = d[sites]
        order = np.lexsort((dd[:, 2], dd[:, 1], dd[:, 0]))
        sites = sites[order]
        if self.block > 1:
            idx = (4 * sites[:, None] + np.arange(4)[None, :]).ravel()
        else:
            idx = sites
        m = self._restricted_matrix(inside)
        # reorder the restricted matrix to the displacement order
        pos = np.searchsorted(np.flatnonzero(inside), sites)
        if self.block > 1:
            pos = (4 * pos[:, None] + np.arange(4)[None, :]).ravel()
        m = m[pos][:, pos].tocsc()
        key = _content_key(m)
        if key not in self._cache:
            try:
                self._cache[key] = Factorized(m)
            except SingularOperator as exc:
                raise BlockInverseError(j, str(exc)) from exc
        return _Cube(sites, idx, self._cache[key])

    def _restricted_matrix(self, inside):
        return self.kit.restricted(inside).matrix

    # single terms ------------------------------------------------------------
    def cube_solve(self, k, v, adjoint=False):
        cube = self.cubes[k]
        out = np.zeros(self.n, dtype=np.result_type(v, self.dtype))
        if adjoint:
            out[cube.idx] = np.conj(cube.solver.solve(np.conj(v[cube.idx]), trans=True))
        else:
            out[cube.idx] = cube.solver.solve(v[cube.idx])
        return out

    def _active(self, k, v):
        return np.any(self.h[k] != 0) and np.any(self._expand(self.h[k] != 0) & (v != 0))

    def P_term(self, k, v):
        """``h_j G_{O_j} h_j v``."""
        hv = self.hvec(k)
        return hv * self.cube_solve(k, hv * v)

    def T_term(self, k, v):
        """``[h_j, op] G_{O_j} h_j v``."""
        hv = self.hvec(k)
        w = self.cube_solve(k, hv * v)
        return hv * (self.op @ w) - self.op @ (hv * w)

    def _sum(self, fn, v, sel):
        v = np.asarray(v)
        out = np.zeros(self.n, dtype=np.result_type(v, self.dtype))
        for k in (range(len(self.centres)) if sel is None else sel):
            if self._active(k, v):
                out += fn(k, v)
        return out

    def gstar(self, v, sel=None):
        return self._sum(self.P_term, v, sel)

    def R(self, v, sel=None):
        return self._sum(self.T_term, v, sel)

    def gstar_H(self, v):
        out = np.zeros(self.n, dtype=np.result_type(v, self.dtype))
        for k in range(len(self.centres)):
            hv = self.hvec(k)
            out += hv * self.cube_solve(k, hv * v, adjoint=True)
        return out

    def R_H(self, v):
        out = np.zeros(self.n, dtype=np.result_type(v, self.dtype))
        for k in range(len(self.centres)):
            hv = self.hvec(k)
            u = self.opH @ (hv * v) - hv * (self.opH @ v)
            if not np.any(u):
                continue
            out += hv * self.cube_solve(k, u, adjoint=True)
        return out

    # dense forms (small lattices) ----------------------------------------------------
    def _cube_inverse(self, k):
        return self.cubes[k].solver.inverse()

    def gstar_matrix(self):
        out = np.zeros((self.n, self.n), dtype=self.dtype)
        for k, cube in enumerate(self.cubes):
            hk = self.hvec(k)[cube.idx]
            out[np.ix_(cube.idx, cube.idx)] += hk[:, None] * self._cube_inverse(k) * hk[None, :]
        return out

    def R_matrix(self):
        out = np.zeros((self.n, self.n), dtype=self.dtype)
        for k, cube in enumerate(self.cubes):
            hv = self.hvec(k)
            W = np.zeros((self.n, cube.idx.size), dtype=self.dtype)
            W[cube.idx] = self._cube_inverse(k) * hv[cube.idx][None, :]
            out[:, cube.idx] += hv[:, None] * (self.op @ W) - self.op @ (hv[:, None] * W)
        return out

    # norms ----------------------------------------------------------------
    def _linop(self, mv, rmv):
        dtype = complex if self.block > 1 else float
        return spla.LinearOperator((self.n, self.n), matvec=lambda v: mv(np.ravel(v)),
                                   rmatvec=lambda v: rmv(np.ravel(v)), dtype=dtype)

    def norm_R(self, tol=1e-8):
        return _top_singular(self._linop(self.R, self.R_H), tol)

    def norm_gstar(self, tol=1e-8):
        return _top_singular(self._linop(self.gstar, self.gstar_H), tol)

    def partition_residual(self):
        return float(np.abs((self.h ** 2).sum(axis=0) - self.mask).max())

    def neighbours(self, a, b):
        d = self.lattice.displacement(self.centres[a], self.centres[b])
        return int(np.abs(d).max()) <= self.M0


def _top_singular(op, tol=1e-8):
    n = op.shape[0]
    if n <= 400:
        m = op.matmat(np.eye(n))
        return float(np.linalg.norm(m, 2))
    rng = np.random.default_rng(12345)
    v0 = rng.standard_normal(n)
    s = spla.svds(op, k=1, tol=tol, v0=v0, return_singular_vectors=False, maxiter=2000)
    return float(s[0])


def build_parametrix(kit, M0, region=None, cube_radius=None):
    return Parametrix(kit, M0, region, cube_radius)


# Neumann partial sums ------------------------------------------------------------
def partial_sums(par, n, rhs):
    """``[G* sum_{k<=m} R^k rhs for m = 0..n]``."""
    v = np.asarray(rhs)
    acc = v.copy()
    out = [par.gstar(acc)]
    for _ in range(n):
        v = par.R(v)
        acc = acc + v
        out.append(par.gstar(acc))
    return out


def walk_sum(par, n, rhs):
    return partial_sums(par, n, rhs)[-1]


@dataclass
class WalkErrorRow:
    n: int
    error: float
    bound: float

    @property
    def ok(self):
        return self.error <= self.bound


def walk_errors(par, n_max, exact=None, tol=1e-8):
    """Operator-norm errors ``||G^(n) - G||`` against ``G*``/``R`` bounds.

    ``exact`` solves with the full operator (``solve(v, trans)``); by default
    the kit's factorisation (or the region-restricted one).
    """
    normR = par.norm_R(tol)
    if normR >= 1:
        raise NotConvergent(f"measured ||R|| = {normR:.4f} >= 1")
    normG = par.norm_gstar(tol)
    if exact is None:
        exact = _exact_solver(par)
    rows = []
    for n in range(n_max + 1):
        def mv(v, n=n):
            return walk_sum(par, n, v) - exact(v, False)

        def rmv(v, n=n):
            # adjoint of G* sum R^k is sum (R^H)^k G*^H
            w = par.gstar_H(v)
            acc = w.copy()
            for _ in range(n):
                w = par.R_H(w)
                acc = acc + w
            return acc - exact(v, True)

        err = _top_singular(par._linop(mv, rmv), tol)
        rows.append(WalkErrorRow(n, err, normG * normR ** (n + 1) / (1 - normR)))
    return normR, normG, rows


def _exact_solver(par):
    if np.all(par.mask):
        solver = par.kit.solver
        idx = None
    else:
        sub = par.kit.restricted(par.mask)
        solver, idx = sub.solver, sub.idx

    def solve(v, adjoint):
        v = np.asarray(v)
        if idx is None:
            return np.conj(solver.solve(np.conj(v), trans=True)) if adjoint else solver.solve(v)
        out = np.zeros(par.n, dtype=np.result_type(v, par.dtype))
        b = v[idx]
        out[idx] = np.conj(solver.solve(np.conj(b), trans=True)) if adjoint else solver.solve(b)
        return out
    return solve


# explicit paths ------------------------------------------------------------------
def enumerate_paths(par, n, rhs, prune=True):
    """``{(j_0, ..., j_m): G_omega rhs}`` for all walks of length ``m <= n``.

    ``G_omega = (h G h)_{j_0} (T)_{j_1} ... (T)_{j_m}`` with neighbouring
    centres.  Terms that vanish identically are dropped when ``prune``.
    """
    nj = len(par.centres)
    nbrs = [[b for b in range(nj) if par.neighbours(a, b)] for a in range(nj)]
    rhs = np.asarray(rhs)
    out = {}

    def close(suffix, vec):
        # prepend a starting factor P_{j0}
        cands = range(nj) if not suffix else nbrs[suffix[0]]
        for j0 in cands:
            if prune and not par._active(j0, vec):
                continue
            out[(j0,) + suffix] = par.P_term(j0, vec)

    def grow(suffix, vec, depth):
        close(suffix, vec)
        if depth == n:
            return
        cands = range(nj) if not suffix else nbrs[suffix[0]]
        for j in cands:
            if prune and not par._active(j, vec):
                continue
            w = par.T_term(j, vec)
            if prune and not np.any(w):
                continue
            grow((j,) + suffix, w, depth + 1)

    grow((), rhs, 0)
    return out


def path_cubes_mask(par, path):
    """Boolean site mask of ``O_{j_0} cup ... cup O_{j_n}``."""
    m = np.zeros(par.lattice.nsites, dtype=bool)
    for k in path:
        m[par.cubes[k].sites] = True
    return m


def path_blocks(par, path, block_side, skip_first=False):
    """The ``block_side`` blocks meeting the cubes of ``path``."""
    labels, _ = par.lattice.block_partition(block_side)
    p = path[1:] if skip_first else path
    if not p:
        return frozenset()
    return frozenset(np.unique(labels[path_cubes_mask(par, p)]).tolist())


def reblock(par, n, rhs, block_side):
    """Group path terms by ``omega_bar`` (the ``M1``-blocks met by the path's cubes).

    Returns ``{X: vector}`` with ``X`` a frozenset of block labels.
    """
    terms = enumerate_paths(par, n, rhs)
    out = {}
    for path, vec in terms.items():
        X = path_blocks(par, path, block_side)
        out[X] = out.get(X, 0) + vec
    return out


def s_weight(par, path, s, block_side):
    """``s_omega``: product of ``s_Delta`` over blocks meeting ``O_{j_1} ... O_{j_n}``."""
    blocks = path_blocks(par, path, block_side, skip_first=True)
    return math.prod(s.get(b, 1.0) for b in blocks)


def s_decouple(par, s, n, rhs, block_side, derivative=None):
    """``G(s) rhs = sum_omega s_omega G_omega rhs`` to walk length ``n``.

    With ``derivative=Y`` (a set of blocks) returns ``d/ds_Y`` instead: only
    walks whose blocks contain ``Y`` contribute, with those factors removed.
    """
    terms = enumerate_paths(par, n, rhs)
    rhs = np.asarray(rhs)
    out = np.zeros(par.n, dtype=np.result_type(rhs, float))
    Y = None if derivative is None else frozenset(derivative)
    for path, vec in terms.items():
        blocks = path_blocks(par, path, block_side, skip_first=True)
        if Y is None:
            w = math.prod(s.get(b, 1.0) for b in blocks)
        else:
            if not Y <= blocks:
                continue
            w = math.prod(s.get(b, 1.0) for b in blocks - Y)
        if w:
            out += w * vec
    return out


# local propagators ---------------------------------------------------------------
class LocalPropagator:
    """Walk sum restricted to walks whose ``h`` supports lie within ``r_loc/2`` of ``x`` and ``y``.

    For ``S = S(x) cap S(y)`` the kernel is ``[P_S (I - T_S)^{-1}](x, y)``
    with ``P_S``, ``T_S`` the parametrix pieces summed over ``j in S``.
    Both act only on the union ``K`` of the supports, so the inverse is a
    dense problem on ``K``.
    """

    def __init__(self, par, r_loc):
        self.par, self.r_loc = par, float(r_loc)
        lat = par.lattice
        half = self.r_loc / 2
        # S(x) = {j : every site of supp h_j is closer than r/2 to x}
        self._supp = [np.flatnonzero(par.h[k] != 0) for k in range(len(par.centres))]
        S = np.zeros((lat.nsites, len(par.centres)), dtype=bool)
        line = np.arange(lat.side)
        for k, supp in enumerate(self._supp):
            # sup-metric: the farthest support point is found axis by axis
            far = np.zeros(lat.nsites)
            for ax in range(3):
                proj = np.unique(lat.coords[supp, ax])
                d = np.abs(line[:, None] - proj[None, :]) % lat.side
                m = np.minimum(d, lat.side - d).max(axis=1)
                far = np.maximum(far, m[lat.coords[:, ax]])
            S[:, k] = far < half
        self.S = S
        keys, self.group = np.unique(S, axis=0, return_inverse=True)
        self.group = self.group.ravel()
        self.keys = keys
        self._blocks = {}

    def _solve_block(self, js):
        """Dense ``P_S (I - T_S)^{-1}`` on ``K = union supp h_j``."""
        key = tuple(js)
        if key in self._blocks:
            return self._blocks[key]
        par = self.par
        K = np.unique(np.concatenate([self._supp[k] for k in js]))
        Kidx = (4 * K[:, None] + np.arange(4)[None, :]).ravel() if par.block > 1 else K
        nK = Kidx.size
        P = np.zeros((nK, nK), dtype=complex if par.block > 1 else float)
        T = np.zeros_like(P)
        for c in range(nK):
            e = np.zeros(par.n)
            e[Kidx[c]] = 1.0
            P[:, c] = par.gstar(e, sel=js)[Kidx]
            T[:, c] = par.R(e, sel=js)[Kidx]
        G = P @ np.linalg.inv(np.eye(nK) - T)
        self._blocks[key] = (K, Kidx, G)
        return self._blocks[key]

    def matrix(self, block_limit=2000):
        """Full kernel as a sparse matrix (only for small supports)."""
        par = self.par
        rows, cols, vals = [], [], []
        ng = len(self.keys)
        for ga in range(ng):
            xa = np.flatnonzero(self.group == ga)
            for gb in range(ng):
                js = np.flatnonzero(self.keys[ga] & self.keys[gb])
                if js.size == 0:
                    continue
                yb = np.flatnonzero(self.group == gb)
                K, Kidx, G = self._solve_block(js)
                if Kidx.size > block_limit:
                    raise MemoryError("local support too large for a dense kernel")
                ra = np.flatnonzero(np.isin(K, xa))
                cb = np.flatnonzero(np.isin(K, yb))
                if ra.size == 0 or cb.size == 0:
                    continue
                if par.block > 1:
                    ra = (4 * ra[:, None] + np.arange(4)[None, :]).ravel()
                    cb = (4 * cb[:, None] + np.arange(4)[None, :]).ravel()
                sub = G[np.ix_(ra, cb)]
                rr, cc = np.nonzero(sub)
                rows.append(Kidx[ra][rr])
                cols.append(Kidx[cb][cc])
                vals.append(sub[rr, cc])
        if not rows:
            return sp.csr_matrix((par.n, par.n))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(par.n, par.n))

    def column(self, y, rows=None, tol=1e-15, max_iter=500):
        """Kernel column at site ``y`` for the sites ``rows`` (matrix-free Neumann).

        Returns an array ``(len(rows), block, block)`` for fermions or
        ``(len(rows),)`` for bosons.
        """
        par = self.par
        lat = par.lattice
        rows = np.arange(lat.nsites) if rows is None else np.asarray(rows)
        b = par.block
        out = np.zeros((rows.size, b, b), dtype=complex if b > 1 else float)
        for g in np.unique(self.group[rows]):
            js = np.flatnonzero(self.keys[g] & self.S[y])
            if js.size == 0:
                continue
            sel = rows[self.group[rows] == g]
            pos = np.flatnonzero(self.group[rows] == g)
            for a in range(b):
                e = np.zeros(par.n)
                e[b * y + a] = 1.0
                acc, v = e.copy(), e
                for _ in range(max_iter):
                    v = par.R(v, sel=js)
                    acc = acc + v
                    if np.abs(v).max() < tol:
                        break
                else:
                    raise NotConvergent("local Neumann series did not converge")
                col = par.gstar(acc, sel=js)
                if b > 1:
                    out[pos, :, a] = col.reshape(-1, b)[sel]
                else:
                    out[pos, 0, 0] = col[sel]
        return out if b > 1 else out[:, 0, 0]


class LocalApply:
    """Adapter giving ``apply(v, mask, trans)`` for the region decompositions.

    ``mask=None`` uses the torus parametrix, a site mask the one built from
    ``[op]_mask``.
    """

    def __init__(self, kit, M0, r_loc, cube_radius=None):
        self.kit, self.M0, self.r_loc = kit, M0, r_loc
        self.cube_radius = cube_radius
        self._mats = {}

    def matrix(self, mask=None):
        key = None if mask is None else np.asarray(mask, dtype=bool).tobytes()
        if key not in self._mats:
            par = Parametrix(self.kit, self.M0, mask, self.cube_radius)
            self._mats[key] = LocalPropagator(par, self.r_loc).matrix().tocsr()
        return self._mats[key]

    def apply(self, v, mask=None, trans=False):
        m = self.matrix(mask)
        return (m.T @ v) if trans else (m @ v)


# decay ---------------------------------------------------------------------------
@dataclass
class DecayFit:
    prefactor: float
    rate: float
    residual: float
    npoints: int


def decay_fit(kernel, dist, floor=1e-14):
    """Fit ``log max_{d(x,y)=d} |K(x,y)|`` to ``log c - beta d`` over off-diagonal distances."""
    k = np.abs(np.asarray(kernel))
    dist = np.asarray(dist)
    ds, env = [], []
    for d in np.unique(dist):
        if d == 0:
            continue
        m = k[dist == d].max()
        if m > floor:
            ds.append(d)
            env.append(np.log(m))
    if not ds:
        return DecayFit(float(k.max()), math.inf, 0.0, 0)
    if len(ds) == 1:
        return DecayFit(math.exp(env[0]), math.inf if k.max() == 0 else math.nan, 0.0, 1)
    A = np.stack([np.ones(len(ds)), -np.asarray(ds, float)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, np.asarray(env), rcond=None)
    resid = float(np.sqrt(res[0] / len(ds))) if res.size else 0.0
    return DecayFit(float(math.exp(coef[0])), float(coef[1]), resid, len(ds))


def site_kernel_norms(matrix, block):
    """Per-site-pair max modulus of a (possibly spinor) kernel."""
    m = np.abs(np.asarray(matrix))
    if block == 1:
        return m
    n = m.shape[0] // block
    return m.reshape(n, block, n, block).max(axis=(1, 3))


def neighbour_pairs(par):
    return [(a, b) for a, b in itertools.product(range(len(par.centres)), repeat=2)
            if par.neighbours(a, b)]
