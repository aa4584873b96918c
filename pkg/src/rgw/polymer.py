"""Polymer activities, Mayer expansion and connected-graph exponentiation.

A domain is a finite list of blocks given by integer coordinates on a block
lattice (optionally periodic).  Subsets of a domain are bit masks over its
blocks.  Two sets touch when they overlap or contain blocks at Chebyshev
distance one (shared face, edge or corner); a set is a polymer when it is
connected for this relation.

Activities are dictionaries ``{mask: value}``; values may be numbers or any
commuting objects with ``+`` and ``*`` (even Grassmann elements).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MAX_DOMAIN = 12
MAX_GRAPH_VERTICES = 7
MAX_COLLECTION_POLYMERS = 22


class EnumerationCapExceeded(ValueError):
    pass


class SeriesDivergent(ArithmeticError):
    pass


class BlockSet:
    """Blocks of a domain with the touching relation."""

    def __init__(self, blocks, period=None):
        self.blocks = [tuple(int(v) for v in b) for b in blocks]
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("repeated block")
        if len(self.blocks) > MAX_DOMAIN:
            raise EnumerationCapExceeded(f"domain of {len(self.blocks)} blocks exceeds cap {MAX_DOMAIN}")
        self.period = period

    @classmethod
    def box(cls, shape, period=None):
        return cls(itertools.product(*(range(s) for s in shape)), period)

    def __len__(self):
        return len(self.blocks)

    @property
    def full(self):
        return (1 << len(self.blocks)) - 1

    def _touch(self, a, b):
        d = np.abs(np.subtract(a, b))
        if self.period is not None:
            d = np.minimum(d, self.period - d)
        return int(d.max()) <= 1

    @cached_property
    def neighbours(self):
        """Bit mask of blocks touching each block (itself included)."""
        n = len(self.blocks)
        out = [0] * n
        for i in range(n):
            for j in range(n):
                if self._touch(self.blocks[i], self.blocks[j]):
                    out[i] |= 1 << j
        return out

    def halo(self, mask):
        out = 0
        for i in _bits(mask):
            out |= self.neighbours[i]
        return out

    def touch(self, X, Y):
        return bool(self.halo(X) & Y)

    def components(self, mask):
        """Connected components of ``mask`` as a sorted list of masks."""
        comps = []
        rest = mask
        while rest:
            seed = rest & -rest
            comp = seed
            frontier = seed
            while frontier:
                grow = self.halo(frontier) & mask & ~comp
                comp |= grow
                frontier = grow
            comps.append(comp)
            rest &= ~comp
        return sorted(comps)

    def connected(self, mask):
        return mask != 0 and len(self.components(mask)) == 1

    @cached_property
    def polymers(self):
        """All connected subsets, by increasing mask."""
        return [m for m in range(1, self.full + 1) if self.connected(m)]

    def size(self, mask):
        return bin(mask).count("1")


def _bits(mask):
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def _submasks(mask):
    s = mask
    while True:
        yield s
        if s == 0:
            return
        s = (s - 1) & mask


def _expm1(v):
    from .grassmann import GrassmannElement, exp_even
    if isinstance(v, GrassmannElement):
        return exp_even(v) - GrassmannElement.one(v.gens)
    return complex(np.expm1(v)) if np.iscomplexobj(v) else float(np.expm1(v))


def _magnitude(v):
    if hasattr(v, "terms"):
        return max((abs(c) for c in v.terms.values()), default=0.0)
    return abs(complex(v))


def _add(acc, key, v):
    acc[key] = v if key not in acc else acc[key] + v


# Mayer expansion -----------------------------------------------------------
def mayer_expand(E, domain):
    """``K0(X) = sum over collections of distinct polymers with union X of prod (e^E - 1)``.

    Computed for every ``X`` (not only polymers) by a subset recursion in
    which each polymer is either left out or included once.
    """
    f = {X: _expm1(v) for X, v in E.items()}
    for X in f:
        if not domain.connected(X):
            raise ValueError(f"activity on the non-polymer {X:#b}")
    # table[Y] = sum over collections (processed so far) with union Y
    table = {0: 1.0}
    for X, fx in sorted(f.items()):
        new = dict(table)
        for Y, v in table.items():
            _add(new, Y | X, v * fx)
        table = new
    table.pop(0)
    return table


def mayer_identity(E, domain):
    """``prod_X e^E(X)`` against ``sum_Y K0(Y)`` (with ``K0(empty) = 1``)."""
    lhs = complex(np.exp(sum(complex(v) for v in E.values())))
    K0 = mayer_expand(E, domain)
    rhs = 1.0 + sum(complex(v) for v in K0.values())
    return lhs, rhs


def factorization_residual(K0, domain):
    """``max |K0(X) - prod_alpha K0(X_alpha)|`` over disconnected ``X``."""
    worst = 0.0
    for X, v in K0.items():
        comps = domain.components(X)
        if len(comps) < 2:
            continue
        prod = 1.0
        for c in comps:
            prod = prod * K0.get(c, 0.0)
        worst = max(worst, abs(complex(v) - complex(prod)))
    return worst


# truncated functions --------------------------------------------------------
def rho_truncated(sets, domain):
    """``rho^T = sum over connected graphs G of prod_{ij in G} (zeta_ij - 1)``.

    ``zeta_ij = 0`` when ``Z_i`` and ``Z_j`` touch.  Explicit enumeration of
    all graphs; capped at ``MAX_GRAPH_VERTICES`` vertices.
    """
    n = len(sets)
    if n == 0:
        raise ValueError("rho^T needs at least one set")
    if n > MAX_GRAPH_VERTICES:
        raise EnumerationCapExceeded(f"{n} vertices exceed the graph cap {MAX_GRAPH_VERTICES}")
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    weight = [(0 if domain.touch(sets[i], sets[j]) else 1) - 1 for i, j in pairs]
    active = [p for p, w in zip(range(len(pairs)), weight) if w != 0]
    total = 0
    for r in range(len(active) + 1):
        for edges in itertools.combinations(active, r):
            if _graph_connected(n, [pairs[e] for e in edges]):
                total += (-1) ** r
    return total


def _graph_connected(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a
    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(i) for i in range(n)}) == 1


# polymer gas ------------------------------------------------------------------
def gas_sum(K, domain):
    """``sum over collections of pairwise non-touching polymers of prod K`` (exhaustive)."""
    polys = sorted(K)
    total = [0.0]

    def rec(start, used_halo, value):
        total[0] = total[0] + value
        for i in range(start, len(polys)):
            X = polys[i]
            if X & used_halo:
                continue
            rec(i + 1, used_halo | domain.halo(X), value * K[X])
    rec(0, 0, 1.0)
    return total[0]


def _compatible_tuples(K, domain, nmax):
    """``W_n(Y)``: ordered tuples of pairwise compatible polymers with union ``Y``."""
    polys = sorted(K)
    W = [dict() for _ in range(nmax + 1)]
    W[0][0] = 1.0

    def rec(start, used_halo, union, value, n):
        if n:
            _add(W[n], union, value * math.factorial(n))
        if n == nmax:
            return
        for i in range(start, len(polys)):
            X = polys[i]
            if X & used_halo:
                continue
            rec(i + 1, used_halo | domain.halo(X), union | X, value * K[X], n + 1)
    rec(0, 0, 0, 1.0, 0)
    return W


@dataclass
class Exponentiation:
    E: dict              # X -> E~(X)
    orders: int
    last_term: float
    by_order: list       # max |contribution| per order
    terms: list          # per order n, {X: C_n(X) / n!}


def exponentiate(K, domain, tol=1e-16, max_order=200):
    """``E~(X) = sum_n 1/n! sum_{union = X} rho^T(Z_1..Z_n) K(Z_1)..K(Z_n)``.

    The connected-graph sums ``C_n(Y)`` follow from the exponential formula
    ``W_n(Y) = sum_k binom(n-1, k-1) sum_{Y1 | Y2 = Y} C_k(Y1) W_{n-k}(Y2)``
    (split by the connected component of the first vertex), where ``W_n``
    is the all-graphs sum: ordered tuples of pairwise compatible polymers.
    """
    if not K:
        return Exponentiation({}, 0, 0.0, [], [])
    pack = _max_packing(K, domain)
    W = _compatible_tuples(K, domain, pack)
    C = [dict()]
    E = {}
    by_order = []
    terms = []
    for n in range(1, max_order + 1):
        Cn = dict(W[n]) if n < len(W) else {}
        for k in range(1, n):
            b = math.comb(n - 1, k - 1)
            if n - k >= len(W):
                continue
            for Y1, c1 in C[k].items():
                for Y2, w2 in W[n - k].items():
                    _add(Cn, Y1 | Y2, -b * c1 * w2)
        C.append(Cn)
        fact = math.factorial(n)
        size = 0.0
        terms.append({Y: v * (1.0 / fact) for Y, v in Cn.items()})
        for Y, v in terms[-1].items():
            _add(E, Y, v)
            size = max(size, _magnitude(v))
        by_order.append(size)
        if n >= 4 and size > by_order[-2] > by_order[-3] > by_order[-4] and size > 1:
            raise SeriesDivergent(f"cluster terms growing at order {n}: {size:.3e}")
        if size <= tol and n > pack:
            return Exponentiation(E, n, size, by_order, terms)
    raise SeriesDivergent(f"no convergence after {max_order} orders (last {by_order[-1]:.3e})")


def _max_packing(K, domain):
    """Largest number of pairwise compatible polymers among the supports of ``K``."""
    best = [0]
    polys = sorted(K)

    def rec(start, used_halo, n):
        best[0] = max(best[0], n)
        for i in range(start, len(polys)):
            if polys[i] & used_halo:
                continue
            rec(i + 1, used_halo | domain.halo(polys[i]), n + 1)
    rec(0, 0, 0)
    return best[0]


def cluster_terms_direct(K, domain, order):
    """``sum_{union = X} rho^T K..K / n!`` at a single order by explicit tuples (oracle)."""
    polys = sorted(K)
    out = {}
    for tup in itertools.product(polys, repeat=order):
        r = rho_truncated(list(tup), domain)
        if r == 0:
            continue
        union = 0
        val = 1.0
        for Z in tup:
            union |= Z
            val = val * K[Z]
        _add(out, union, r * val / math.factorial(order))
    return out


def exponentiation_identity(K, domain, **kw):
    """``(exp(sum E~), gas sum)`` on the whole domain."""
    ex = exponentiate(K, domain, **kw)
    lhs = complex(np.exp(sum(complex(v) for v in ex.E.values())))
    return lhs, complex(gas_sum(K, domain)), ex


def random_activity(domain, rng, bound=0.05, kappa=1.0, complex_values=True):
    """Random activity on all polymers with ``|K(Z)| <= bound e^(-kappa (|Z| - 1))``."""
    out = {}
    for X in domain.polymers:
        r = bound * math.exp(-kappa * (domain.size(X) - 1)) * rng.uniform(0, 1)
        ph = rng.uniform(0, 2 * np.pi) if complex_values else (0.0 if rng.uniform() < 0.5 else np.pi)
        v = r * np.exp(1j * ph)
        out[X] = complex(v) if complex_values else float(v.real)
    return out


# bounds -------------------------------------------------------------------
@dataclass
class PolymerSumBound:
    counts: dict           # |X| -> number of polymers containing the block
    kappa: float
    value: float
    threshold: float       # smallest kappa with value <= 1

    @property
    def holds(self):
        return self.value <= 1.0


def _animals(period, cap, origin=(0, 0, 0)):
    """Connected block sets containing ``origin`` with at most ``cap`` blocks."""
    offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]

    def norm(b):
        return tuple(v % period for v in b) if period else b
    start = frozenset([norm(origin)])
    seen = {start}
    frontier = [start]
    for _ in range(cap - 1):
        nxt = []
        for s in frontier:
            for b in s:
                for d in offs:
                    nb = norm(tuple(b[i] + d[i] for i in range(3)))
                    if nb in s:
                        continue
                    t = s | {nb}
                    if t not in seen:
                        seen.add(t)
                        nxt.append(t)
        frontier = nxt
    return seen


def polymer_sum_bound(kappa, cap=3, period=4):
    """``sum_{X containing a block, |X| <= cap} e^(-kappa |X|)`` by enumeration."""
    counts = {}
    for s in _animals(period, cap):
        counts[len(s)] = counts.get(len(s), 0) + 1

    def value(k):
        return sum(c * math.exp(-k * n) for n, c in counts.items())
    lo, hi = 0.0, 50.0
    if value(lo) <= 1:
        hi = lo
    for _ in range(200):
        if hi - lo < 1e-14:
            break
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if value(mid) <= 1 else (mid, hi)
    return PolymerSumBound(dict(sorted(counts.items())), kappa, value(kappa), hi)


@dataclass
class ProductSumBound:
    lhs: float
    middle: float
    rhs: float
    enumerated: bool

    @property
    def holds(self):
        return self.lhs <= self.middle * (1 + 1e-15) and self.middle <= self.rhs * (1 + 1e-15)


def product_sum_bound(alpha, kappa, X):
    """``sum over collections of connected subsets of prod alpha e^(-kappa|X_i|)``.

    Compared with ``exp(sum_X' alpha e^(-kappa|X'|))`` and ``exp(alpha |X|_1)``.
    Collections are enumerated when there are at most
    ``MAX_COLLECTION_POLYMERS`` connected subsets, otherwise the sum is the
    product over subsets (each either in or out of the collection).
    """
    dom = X if isinstance(X, BlockSet) else BlockSet(X)
    if len(dom) > 6:
        raise EnumerationCapExceeded("product_sum_bound enumerates at most 6 blocks")
    weights = [alpha * math.exp(-kappa * dom.size(p)) for p in dom.polymers]
    if len(weights) <= MAX_COLLECTION_POLYMERS:
        lhs = 0.0
        for r in range(len(weights) + 1):
            for c in itertools.combinations(weights, r):
                lhs += math.prod(c)
        enumerated = True
    else:
        lhs = math.prod(1 + w for w in weights)
        enumerated = False
    return ProductSumBound(lhs, math.exp(sum(weights)), math.exp(alpha * len(dom)), enumerated)
