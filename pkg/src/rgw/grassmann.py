"""Finite Grassmann algebras with h-norms and Gaussian integration.

An element is stored as ``{mask: coefficient}`` where ``mask`` selects an
increasing product of generators.  The coefficient of the ordered monomial
on ``i_1 < ... < i_n`` equals the antisymmetric kernel at that tuple, so the
kernel's l1 norm over all tuples is ``n!`` times the sum of ``|c|`` and

    ||F||_h = sum_n h^n/n! ||k_n||_1 = sum_I h^|I| |c_I|.

Generators are labelled by :class:`GeneratorIndex`; the natural tuple
order (family, then barred flag, then site, then spinor) fixes the
canonical monomial order.  Within one family all unbarred generators
precede the barred ones.
"""
from __future__ import annotations

import json
import math
from typing import NamedTuple

import numpy as np

from . import kernels

MAX_EXPANSION = 20  # cap for operations that expand the full algebra
_MASK_BITS = 64


class GeneratorMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class SingularTLambda(np.linalg.LinAlgError):
    pass


class ExpansionTooLarge(ValueError):
    pass


class GeneratorIndex(NamedTuple):
    family: int
    bar_flag: int
    site: int
    spinor: int


class GeneratorSet:
    """Ordered, immutable set of generator labels."""

    def __init__(self, labels):
        labels = sorted(GeneratorIndex(*lab) for lab in labels)
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate generator labels")
        self.labels = tuple(labels)
        self.position = {lab: i for i, lab in enumerate(self.labels)}

    @classmethod
    def from_sites(cls, sites, spinors=1, families=(0,)):
        return cls((f, b, s, a) for f in families for b in (0, 1) for s in sites for a in range(spinors))

    @classmethod
    def anonymous(cls, n):
        """``n`` unlabelled generators (family 0, unbarred, site = index)."""
        return cls((0, 0, i, 0) for i in range(n))

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, GeneratorSet) and self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def select(self, family=None, bar_flag=None):
        return [i for i, lab in enumerate(self.labels)
                if (family is None or lab.family == family) and (bar_flag is None or lab.bar_flag == bar_flag)]

    def subset(self, positions):
        return GeneratorSet(self.labels[i] for i in positions)

    def index(self, label):
        return self.position[GeneratorIndex(*label)]


def _bits(mask):
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def _sort_sign(indices):
    """Sign of the permutation sorting ``indices`` (0 if an index repeats)."""
    idx = list(indices)
    if len(set(idx)) != len(idx):
        return 0
    sign = 1
    for i in range(len(idx)):
        for j in range(i + 1, len(idx)):
            if idx[i] > idx[j]:
                sign = -sign
    return sign


def _merge_sign(a, b):
    if a >> _MASK_BITS or b >> _MASK_BITS:
        return kernels._kernels_py.merge_sign(a, b)
    return int(kernels.merge_sign(a, b))


class GrassmannElement:
    """Immutable element of the algebra over ``gens``."""

    __slots__ = ("gens", "terms")

    def __init__(self, gens, terms=None, tol=0.0):
        if isinstance(gens, int):
            gens = GeneratorSet.anonymous(gens)
        self.gens = gens
        clean = {}
        for m, c in (terms or {}).items():
            c = complex(c)
            if abs(c) > tol:
                clean[int(m)] = c
        self.terms = clean

    # construction ----------------------------------------------------------
    @classmethod
    def from_terms(cls, gens, terms):
        """Build from ``{index tuple: coefficient}`` with tuples in any order."""
        if isinstance(gens, int):
            gens = GeneratorSet.anonymous(gens)
        out = {}
        n = len(gens)
        for tup, c in terms.items():
            tup = tuple(int(i) for i in tup)
            if any(i < 0 or i >= n for i in tup):
                raise GeneratorMismatch(f"index out of range in {tup}")
            s = _sort_sign(tup)
            if s == 0:
                continue
            m = 0
            for i in tup:
                m |= 1 << i
            out[m] = out.get(m, 0) + s * c
        return cls(gens, out)

    @classmethod
    def one(cls, gens, value=1.0):
        return cls(gens, {0: value})

    @classmethod
    def generator(cls, gens, i, coeff=1.0):
        return cls(gens, {1 << int(i): coeff})

    @classmethod
    def linear(cls, gens, coeffs):
        """``sum_i coeffs[i] Psi(i)``."""
        return cls(gens, {1 << i: c for i, c in enumerate(coeffs) if c != 0})

    @classmethod
    def random(cls, gens, rng, n_terms=6, max_degree=None, scale=1.0, complex_coeffs=True):
        if isinstance(gens, int):
            gens = GeneratorSet.anonymous(gens)
        n = len(gens)
        max_degree = n if max_degree is None else min(max_degree, n)
        terms = {}
        for _ in range(n_terms):
            d = int(rng.integers(0, max_degree + 1))
            idx = rng.choice(n, size=d, replace=False)
            m = 0
            for i in idx:
                m |= 1 << int(i)
            c = rng.standard_normal() + (1j * rng.standard_normal() if complex_coeffs else 0)
            terms[m] = terms.get(m, 0) + scale * c
        return cls(gens, terms)

    # inspection ------------------------------------------------------------
    def __len__(self):
        return len(self.terms)

    def coefficient(self, indices):
        s = _sort_sign(indices)
        m = 0
        for i in indices:
            m |= 1 << int(i)
        return s * self.terms.get(m, 0.0) if s else 0.0

    def degrees(self):
        return sorted({bin(m).count("1") for m in self.terms})

    def degree_part(self, n):
        return GrassmannElement(self.gens, {m: c for m, c in self.terms.items() if bin(m).count("1") == n})

    def is_even(self):
        return all(bin(m).count("1") % 2 == 0 for m in self.terms)

    def kernel_l1(self, n):
        """l1 norm of the fully antisymmetrised degree-n kernel."""
        return math.factorial(n) * sum(abs(c) for m, c in self.terms.items() if bin(m).count("1") == n)

    def norm(self, h):
        return float(sum(h ** bin(m).count("1") * abs(c) for m, c in self.terms.items()))

    def scalar(self):
        return self.terms.get(0, 0.0)

    def allclose(self, other, atol=1e-12):
        self._check(other)
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0) - other.terms.get(k, 0)) <= atol for k in keys)

    def max_diff(self, other):
        self._check(other)
        keys = set(self.terms) | set(other.terms)
        return max((abs(self.terms.get(k, 0) - other.terms.get(k, 0)) for k in keys), default=0.0)

    # arithmetic ------------------------------------------------------------
    def _check(self, other):
        if self.gens != other.gens:
            raise GeneratorMismatch("elements live on different generator sets")

    def __add__(self, other):
        if not isinstance(other, GrassmannElement):
            other = GrassmannElement.one(self.gens, other)
        self._check(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0) + c
        return GrassmannElement(self.gens, out)

    __radd__ = __add__

    def __neg__(self):
        return GrassmannElement(self.gens, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, GrassmannElement):
            return GrassmannElement(self.gens, {m: other * c for m, c in self.terms.items()})
        return product(self, other)

    def __rmul__(self, other):
        return GrassmannElement(self.gens, {m: other * c for m, c in self.terms.items()})

    def __repr__(self):
        return f"GrassmannElement({len(self.gens)} gens, {len(self.terms)} terms)"

    # serialisation -----------------------------------------------------------
    def to_json(self):
        rows = []
        for m in sorted(self.terms):
            idx = _bits(m)
            c = self.terms[m]
            rows.append([len(idx), idx, c.real, c.imag])
        return json.dumps({"generators": [list(lab) for lab in self.gens.labels], "terms": rows})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        gens = GeneratorSet(tuple(lab) for lab in data["generators"])
        terms = {tuple(idx): complex(re, im) for _, idx, re, im in data["terms"]}
        return cls.from_terms(gens, terms)


def product(F, G):
    """Graded product ``FG``."""
    F._check(G)
    if not F.terms or not G.terms:
        return GrassmannElement(F.gens)
    if len(F.gens) <= _MASK_BITS:
        ma = np.fromiter(F.terms.keys(), dtype=np.uint64, count=len(F.terms))
        ca = np.fromiter(F.terms.values(), dtype=complex, count=len(F.terms))
        mb = np.fromiter(G.terms.keys(), dtype=np.uint64, count=len(G.terms))
        cb = np.fromiter(G.terms.values(), dtype=complex, count=len(G.terms))
        m, c = kernels.product_terms(ma, ca, mb, cb)
        if m.size == 0:
            return GrassmannElement(F.gens)
        keys, inv = np.unique(m, return_inverse=True)
        vals = np.zeros(keys.size, dtype=complex)
        np.add.at(vals, inv.ravel(), c)
        return GrassmannElement(F.gens, dict(zip(keys.tolist(), vals.tolist())))
    out = {}
    for a, x in F.terms.items():
        for b, y in G.terms.items():
            if a & b:
                continue
            out[a | b] = out.get(a | b, 0) + _merge_sign(a, b) * x * y
    return GrassmannElement(F.gens, out)


def exp_even(S):
    """``exp(S)`` for an element with even degrees (the series terminates)."""
    if not S.is_even():
        raise ValueError("exp_even needs an even element")
    nil = GrassmannElement(S.gens, {m: c for m, c in S.terms.items() if m})
    base = np.exp(S.scalar())
    out = GrassmannElement.one(S.gens)
    term = GrassmannElement.one(S.gens)
    k = 0
    while term.terms:
        k += 1
        term = product(term, nil) * (1.0 / k)
        out = out + term
    return out * base


# jordan-wigner oracle ---------------------------------------------------------------
def matrix_representation(F):
    """Faithful ``2^n x 2^n`` matrix image of ``F`` (Jordan-Wigner)."""
    n = len(F.gens)
    if n > 12:
        raise ExpansionTooLarge("matrix representation limited to 12 generators")
    lower = np.array([[0.0, 1.0], [0.0, 0.0]])
    z = np.diag([1.0, -1.0])
    gens = []
    for i in range(n):
        m = np.array([[1.0]])
        for k in range(n):
            m = np.kron(m, z if k < i else (lower if k == i else np.eye(2)))
        gens.append(m)
    out = np.zeros((2 ** n, 2 ** n), dtype=complex)
    for mask, c in F.terms.items():
        m = np.eye(2 ** n)
        for i in _bits(mask):
            m = m @ gens[i]
        out += c * m
    return out


# norms of covariances and transformations ---------------------------------------------
def one_norm(A):
    """``||A||^(1) = sup_xi sum_xi' |A(xi, xi')|``."""
    return float(np.abs(np.asarray(A)).sum(axis=1).max()) if np.size(A) else 0.0


class CovarianceData:
    """Covariance ``Gamma(x, xbar)`` attached to generator positions.

    ``rows[i]`` is the position of the unbarred generator ``x_i`` and
    ``cols[j]`` that of the barred ``xbar_j``.
    """

    def __init__(self, Gamma, rows, cols):
        self.Gamma = np.asarray(Gamma, dtype=complex)
        self.rows, self.cols = [int(r) for r in rows], [int(c) for c in cols]
        if self.Gamma.shape != (len(self.rows), len(self.cols)):
            raise DimensionMismatch(f"Gamma {self.Gamma.shape} vs {len(self.rows)}x{len(self.cols)} generators")
        self._row_of = {p: i for i, p in enumerate(self.rows)}
        self._col_of = {p: j for j, p in enumerate(self.cols)}

    @classmethod
    def for_family(cls, gens, Gamma, family=0):
        return cls(Gamma, gens.select(family, 0), gens.select(family, 1))

    @property
    def norm2(self):
        """``||Gamma||^(2) = (sup_x sum_xbar |Gamma|^2)^(1/2)``."""
        if self.Gamma.size == 0:
            return 0.0
        return float(np.sqrt((np.abs(self.Gamma) ** 2).sum(axis=1).max()))

    @property
    def mask(self):
        m = 0
        for p in self.rows + self.cols:
            m |= 1 << p
        return m

    def minor_value(self, mask):
        """Integral of the ordered monomial ``mask`` (all in this family).

        ``Psi(x_1)..Psi(x_n) Psibar(xb_1)..Psibar(xb_n)`` integrates to
        ``sigma_n det Gamma(x_i, xb_j)``, ``sigma_n = (-1)^(n(n-1)/2)``.
        """
        idx = _bits(mask)
        xs = [self._row_of[p] for p in idx if p in self._row_of]
        xb = [self._col_of[p] for p in idx if p in self._col_of]
        if len(xs) != len(xb):
            return 0.0
        n = len(xs)
        if n == 0:
            return 1.0
        sigma = -1 if (n * (n - 1) // 2) % 2 else 1
        return sigma * np.linalg.det(self.Gamma[np.ix_(xs, xb)])


def sigma(n):
    """Sign taking ``Psi(x1)..Psi(xn)Psibar(xb1)..Psibar(xbn)`` to the interleaved order."""
    return -1 if (n * (n - 1) // 2) % 2 else 1


def gaussian_integral(F, cov):
    """``int F dmu_Gamma`` by the determinant formula (singular Gamma allowed)."""
    fam = cov.mask
    total = 0.0
    for m, c in F.terms.items():
        if m & ~fam:
            raise GeneratorMismatch("F depends on generators outside the covariance")
        total += c * cov.minor_value(m)
    return complex(total)


def _compress(mask, positions):
    out = 0
    for k, p in enumerate(positions):
        if mask >> p & 1:
            out |= 1 << k
    return out


def partial_gaussian_integral(F, cov):
    """Integrate the generators of ``cov`` only; the result lives on the rest."""
    fam = cov.mask
    kept = [i for i in range(len(F.gens)) if not fam >> i & 1]
    gens = F.gens.subset(kept)
    out = {}
    for m, c in F.terms.items():
        inner = m & fam
        outer = m & ~fam
        v = cov.minor_value(inner)
        if v == 0:
            continue
        # mono(m) = sign * mono(outer) mono(inner)
        s = _merge_sign(outer, inner)
        k = _compress(outer, kept)
        out[k] = out.get(k, 0) + s * c * v
    return GrassmannElement(gens, out)


def hadamard_ratio(cov, xs, xb):
    """``|det Gamma(x_i, xb_j)| / (||Gamma||^(2))^n`` for one minor."""
    n = len(xs)
    d = abs(np.linalg.det(cov.Gamma[np.ix_(xs, xb)])) if n else 1.0
    b = cov.norm2 ** n
    return d / b if b > 0 else (0.0 if d == 0 else np.inf)


# change of variables ------------------------------------------------------------------
def change_of_variables(F, A, target=None):
    """``F'(Psi) = F(A Psi)`` with ``(A Psi)(xi) = sum_xi' A(xi, xi') Psi(xi')``.

    ``A`` has one row per generator of ``F`` and one column per generator
    of ``target`` (default: the same set).
    """
    target = F.gens if target is None else target
    A = np.asarray(A)
    if A.shape != (len(F.gens), len(target)):
        raise DimensionMismatch(f"A has shape {A.shape}, expected {(len(F.gens), len(target))}")
    images = [GrassmannElement.linear(target, A[i]) for i in range(len(F.gens))]
    cache = {0: GrassmannElement.one(target)}

    def image(mask):
        if mask not in cache:
            top = mask.bit_length() - 1
            cache[mask] = product(image(mask ^ (1 << top)), images[top])
        return cache[mask]

    out = GrassmannElement(target)
    for m, c in F.terms.items():
        out = out + image(m) * c
    return out


# berezin oracle -----------------------------------------------------------------
def _top_extract(G, fam_mask, kept):
    """Coefficient of the full family monomial, as an element on ``kept``."""
    gens = G.gens.subset(kept)
    out = {}
    for m, c in G.terms.items():
        if m & fam_mask != fam_mask:
            continue
        outer = m & ~fam_mask
        s = _merge_sign(outer, fam_mask)
        k = _compress(outer, kept)
        out[k] = out.get(k, 0) + s * c
    return GrassmannElement(gens, out)


def berezin_integral(F, D, rows, cols):
    """Normalised Berezin integral against ``exp(-(Psibar, D Psi))``.

    ``D[j, i]`` couples the barred generator ``cols[j]`` to the unbarred
    ``rows[i]``; the covariance is ``D^{-1}``.  Expands the full algebra,
    so it is only an oracle for small systems.
    """
    n = len(F.gens)
    if n > MAX_EXPANSION:
        raise ExpansionTooLarge(f"{n} generators exceed the expansion cap {MAX_EXPANSION}")
    D = np.asarray(D)
    S = GrassmannElement(F.gens)
    terms = {}
    for j, cb in enumerate(cols):
        for i, r in enumerate(rows):
            if D[j, i] != 0:
                terms[(cb, r)] = terms.get((cb, r), 0) - D[j, i]
    S = GrassmannElement.from_terms(F.gens, terms)
    W = exp_even(S)
    fam = 0
    for p in list(rows) + list(cols):
        fam |= 1 << int(p)
    kept = [i for i in range(n) if not fam >> i & 1]
    num = _top_extract(product(F, W), fam, kept)
    den = _top_extract(W, fam, kept).scalar()
    if den == 0:
        raise SingularTLambda("Berezin normalisation vanishes")
    return num * (1.0 / den)


# conditional expectation --------------------------------------------------------
def split_generators(n_sites):
    """Generators ``Psi(x), Psibar(x)`` for ``x = 0..n_sites-1`` (rows, cols)."""
    gens = GeneratorSet.from_sites(range(n_sites))
    return gens, gens.select(0, 0), gens.select(0, 1)


def conditional_means(T, lam):
    """``(Gamma_L, B, Bbar)`` with ``beta = B Psi_Lc`` and ``betabar = Bbar Psibar_Lc``."""
    T = np.asarray(T)
    lam = np.asarray(lam, dtype=bool)
    L, Lc = np.flatnonzero(lam), np.flatnonzero(~lam)
    TL = T[np.ix_(L, L)]
    try:
        G = np.linalg.inv(TL) if L.size else np.zeros((0, 0))
        if L.size and not np.all(np.isfinite(G)):
            raise np.linalg.LinAlgError("non-finite inverse")
        if L.size and np.linalg.cond(TL) > 1e14:
            raise np.linalg.LinAlgError("T_Lambda numerically singular")
    except np.linalg.LinAlgError as exc:
        raise SingularTLambda(str(exc)) from exc
    B = -G @ T[np.ix_(L, Lc)]
    Bbar = -G.T @ T[np.ix_(Lc, L)].T
    return G, B, Bbar


def fermion_conditional(T, lam, F):
    """``F~`` on the ``Lambda^c`` generators: shift by the means, then integrate ``Lambda``.

    ``F`` lives on ``split_generators(len(T))[0]``; ``(Psibar, T Psi) =
    sum Psibar(x) T(x, y) Psi(y)``.
    """
    T = np.asarray(T)
    n = T.shape[0]
    gens, rows, cols = split_generators(n)
    if F.gens != gens:
        raise GeneratorMismatch("F must live on split_generators(len(T))")
    lam = np.asarray(lam, dtype=bool)
    G, B, Bbar = conditional_means(T, lam)
    L, Lc = np.flatnonzero(lam), np.flatnonzero(~lam)
    A = np.eye(len(gens), dtype=complex)
    for a, x in enumerate(L):
        for b, y in enumerate(Lc):
            A[rows[x], rows[y]] += B[a, b]
            A[cols[x], cols[y]] += Bbar[a, b]
    shifted = change_of_variables(F, A)
    cov = CovarianceData(G, [rows[x] for x in L], [cols[x] for x in L])
    return partial_gaussian_integral(shifted, cov)


def conditional_identity(T, lam, F, H):
    """Both sides of the conditional split, each by full Berezin expansion.

    ``H`` must depend on ``Lambda^c`` generators only.  Returns
    ``(lhs, rhs)`` normalised by the full Gaussian weight.
    """
    T = np.asarray(T)
    n = T.shape[0]
    gens, rows, cols = split_generators(n)
    lam = np.asarray(lam, dtype=bool)
    for m in H.terms:
        for p in _bits(m):
            if lam[gens.labels[p].site]:
                raise GeneratorMismatch("H depends on Lambda generators")
    lhs = berezin_integral(product(H, F), T, rows, cols).scalar()
    Ft = fermion_conditional(T, lam, F)
    Lc = np.flatnonzero(~lam)
    kept = [rows[x] for x in Lc] + [cols[x] for x in Lc]
    kept_sorted = sorted(kept)
    # embed F~ back into the full algebra
    emb = {}
    for m, c in Ft.terms.items():
        full = 0
        for k in _bits(m):
            full |= 1 << kept_sorted[k]
        emb[full] = c
    Ft_full = GrassmannElement(gens, emb)
    rhs = berezin_integral(product(H, Ft_full), T, rows, cols).scalar()
    return complex(lhs), complex(rhs)
