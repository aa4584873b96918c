"""Bosonic Gaussian machinery: a Wick moment oracle on polynomials,
conditional splits, the quadratic-perturbation formula, the smooth cutoff
and the constrained two-point function.

Polynomials are ``{exponent tuple: coefficient}`` dictionaries over ``d``
real variables (:class:`Poly`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla


class SingularTLambda(np.linalg.LinAlgError):
    pass


class SeriesDivergent(ArithmeticError):
    pass


class DegenerateDenominator(ArithmeticError):
    pass


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


# polynomials --------------------------------------------------------------------
class Poly:
    __slots__ = ("d", "terms")

    def __init__(self, d, terms=None, tol=0.0):
        self.d = int(d)
        self.terms = {tuple(int(e) for e in k): float(v) for k, v in (terms or {}).items() if abs(v) > tol}

    @classmethod
    def const(cls, d, c=1.0):
        return cls(d, {(0,) * d: c})

    @classmethod
    def var(cls, d, i, c=1.0):
        e = [0] * d
        e[i] = 1
        return cls(d, {tuple(e): c})

    @classmethod
    def linear(cls, coeffs, const=0.0):
        d = len(coeffs)
        p = cls.const(d, const)
        for i, c in enumerate(coeffs):
            if c:
                p = p + cls.var(d, i, c)
        return p

    @classmethod
    def quadratic(cls, M):
        """``(x, M x)``."""
        M = np.asarray(M, float)
        d = M.shape[0]
        out = {}
        for i in range(d):
            for j in range(d):
                if M[i, j]:
                    e = [0] * d
                    e[i] += 1
                    e[j] += 1
                    out[tuple(e)] = out.get(tuple(e), 0.0) + M[i, j]
        return cls(d, out)

    @classmethod
    def random(cls, d, rng, degree, n_terms=6, scale=1.0):
        out = {}
        for _ in range(n_terms):
            deg = int(rng.integers(0, degree + 1))
            e = [0] * d
            for i in rng.integers(0, d, size=deg):
                e[i] += 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + scale * rng.standard_normal()
        return cls(d, out)

    def degree(self):
        return max((sum(k) for k in self.terms), default=0)

    def variables(self):
        return {i for k in self.terms for i, e in enumerate(k) if e}

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(self.d, other)
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Poly(self.d, out)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.d, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly(self.d, {k: other * v for k, v in self.terms.items()})
        out = {}
        for a, x in self.terms.items():
            for b, y in other.terms.items():
                k = tuple(i + j for i, j in zip(a, b))
                out[k] = out.get(k, 0.0) + x * y
        return Poly(self.d, out)

    __rmul__ = __mul__

    def __pow__(self, n):
        out = Poly.const(self.d)
        for _ in range(n):
            out = out * self
        return out

    def __call__(self, x):
        x = np.asarray(x, float)
        total = np.zeros(x.shape[1:]) if x.ndim > 1 else 0.0
        for k, v in self.terms.items():
            t = v
            for i, e in enumerate(k):
                if e:
                    t = t * x[i] ** e
            total = total + t
        return total

    def substitute(self, images):
        """Replace variable ``i`` by the polynomial ``images[i]``."""
        d = images[0].d
        out = Poly(d)
        powers = [{0: Poly.const(d)} for _ in range(self.d)]

        def pw(i, e):
            if e not in powers[i]:
                powers[i][e] = pw(i, e - 1) * images[i]
            return powers[i][e]

        for k, v in self.terms.items():
            t = Poly.const(d, v)
            for i, e in enumerate(k):
                if e:
                    t = t * pw(i, e)
            out = out + t
        return out

    def max_diff(self, other):
        keys = set(self.terms) | set(other.terms)
        return max((abs(self.terms.get(k, 0) - other.terms.get(k, 0)) for k in keys), default=0.0)


# gaussians ----------------------------------------------------------------------
def _check_spd(T, what="T"):
    T = np.asarray(T, float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"{what} must be square")
    asym = np.abs(T - T.T).max() if T.size else 0.0
    if asym > 1e-13 * max(1.0, np.abs(T).max()):
        raise ValueError(f"{what} not symmetric (residual {asym:.2e})")
    try:
        sla.cholesky(T, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return T


@dataclass
class GaussianSpec:
    """``exp(-1/2 (A - mean, T (A - mean)))`` on labelled variables."""

    T: np.ndarray
    mean: np.ndarray | None = None
    labels: tuple | None = None

    def __post_init__(self):
        self.T = _check_spd(self.T)
        d = self.T.shape[0]
        self.mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, float)
        self.labels = tuple(range(d)) if self.labels is None else tuple(self.labels)

    @property
    def covariance(self):
        return np.linalg.inv(self.T)

    def oracle(self):
        return MomentOracle(self.covariance, self.mean)


class MomentOracle:
    """Closed-form Wick moments of ``N(mean, C)``.

    Central moments follow the pairing recursion
    ``E[y^a] = sum_j C_ij a_j' E[y^(a - e_i - e_j)]`` (``a' = a - e_i``).
    """

    def __init__(self, C, mean=None):
        self.C = np.asarray(C, float)
        self.d = self.C.shape[0]
        self.mean = np.zeros(self.d) if mean is None else np.asarray(mean, float)
        self._central = lru_cache(maxsize=None)(self._central_moment)

    def _central_moment(self, a):
        if sum(a) == 0:
            return 1.0
        if sum(a) % 2:
            return 0.0
        i = next(k for k, e in enumerate(a) if e)
        b = list(a)
        b[i] -= 1
        total = 0.0
        for j, e in enumerate(b):
            if e and self.C[i, j]:
                c = list(b)
                c[j] -= 1
                total += e * self.C[i, j] * self._central(tuple(c))
        return total

    def central(self, a):
        return self._central(tuple(int(e) for e in a))

    def moment(self, a):
        """``E[x^a]`` for ``x ~ N(mean, C)`` by binomial expansion around the mean."""
        a = tuple(int(e) for e in a)
        if not np.any(self.mean):
            return self.central(a)
        total = 0.0
        for b in np.ndindex(*[e + 1 for e in a]):
            coef = 1.0
            for e, k, m in zip(a, b, self.mean):
                coef *= math.comb(e, k) * m ** (e - k)
            if coef:
                total += coef * self.central(b)
        return total

    def expect(self, poly):
        if poly.d != self.d:
            raise ValueError("polynomial dimension does not match the Gaussian")
        return float(sum(v * self.moment(k) for k, v in poly.terms.items()))


def gauss_hermite_expect(f, C, mean=None, n=20):
    """Tensor Gauss-Hermite quadrature of ``E[f(x)]`` (``d <= 3``)."""
    C = np.asarray(C, float)
    d = C.shape[0]
    if d > 3:
        raise ValueError("quadrature limited to three dimensions")
    mean = np.zeros(d) if mean is None else np.asarray(mean, float)
    z, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids])
    wts = np.ones([n] * d)
    for k in range(d):
        shape = [1] * d
        shape[k] = n
        wts = wts * w.reshape(shape)
    wts = wts.ravel()
    L = np.linalg.cholesky(C)
    x = mean[:, None] + L @ pts
    return float(np.sum(wts * f(x)))


# conditional split ---------------------------------------------------------------
def conditional_mean_map(T, lam):
    """``(C_L, M)`` with ``alpha_L = M A_Lc``."""
    T = np.asarray(T, float)
    lam = np.asarray(lam, bool)
    L, Lc = np.flatnonzero(lam), np.flatnonzero(~lam)
    if L.size == 0:
        return np.zeros((0, 0)), np.zeros((0, Lc.size))
    TL = T[np.ix_(L, L)]
    try:
        sla.cholesky(TL, lower=True)
        CL = np.linalg.inv(TL)
    except np.linalg.LinAlgError as exc:
        raise SingularTLambda(str(exc)) from exc
    return CL, -CL @ T[np.ix_(L, Lc)]


def conditional_expectation(T, lam, F):
    """``F~(A_Lc) = int F(A) dmu_{C_L, alpha_L}(A_L)`` as a polynomial on all variables
    (independent of the ``Lambda`` ones)."""
    T = np.asarray(T, float)
    d = T.shape[0]
    lam = np.asarray(lam, bool)
    L, Lc = np.flatnonzero(lam), np.flatnonzero(~lam)
    CL, M = conditional_mean_map(T, lam)
    if L.size == 0:
        return Poly(d, F.terms)
    # variables: A_L = alpha_L(A_Lc) + y, y ~ N(0, C_L); integrate y exactly
    # work in d + |L| variables: original slots, then the fluctuation y
    D = d + L.size
    images = []
    pos = {x: k for k, x in enumerate(L)}
    for x in range(d):
        if lam[x]:
            k = pos[x]
            p = Poly.var(D, d + k)
            for b, y in enumerate(Lc):
                if M[k, b]:
                    p = p + Poly.var(D, y, M[k, b])
        else:
            p = Poly.var(D, x)
        images.append(p)
    G = F.substitute(images)
    orc = MomentOracle(CL)
    out = {}
    for k, v in G.terms.items():
        m = orc.central(k[d:])
        if m:
            key = k[:d]
            out[key] = out.get(key, 0.0) + v * m
    return Poly(d, out)


@dataclass
class SplitResult:
    lhs: float
    rhs: float

    @property
    def residual(self):
        return abs(self.lhs - self.rhs)

    @property
    def relative(self):
        return self.residual / max(abs(self.lhs), abs(self.rhs), 1e-300)


def conditional_split(T, lam, F, H):
    """Both sides of the boson conditional split via the Wick oracle.

    ``H`` may only involve ``Lambda^c`` variables.  The weight
    ``exp(-1/2 (A, T A))`` is normalised on both sides.
    """
    T = _check_spd(T)
    lam = np.asarray(lam, bool)
    if any(lam[i] for i in H.variables()):
        raise ValueError("H depends on Lambda variables")
    orc = MomentOracle(np.linalg.inv(T))
    Ft = conditional_expectation(T, lam, F)
    return SplitResult(orc.expect(H * F), orc.expect(H * Ft))


# quadratic perturbation ---------------------------------------------------------
@dataclass
class QuadraticPerturbation:
    closed: float
    series: float
    series_bound: float
    terms: int


def _spectral(m):
    return float(np.linalg.norm(m, 2)) if m.size else 0.0


def quadratic_perturbation(C, w2, f, tol=1e-15, max_terms=500):
    """``int exp(-(A, f) - 1/2 (A, w2 A)) dmu_C`` in closed form and by series.

    Closed form: ``det(1 + w2 C)^(-1/2) exp(1/2 (f, (w2 + C^-1)^-1 f))``.
    Series: trace-log expansion of the determinant and the Neumann series
    ``(w2 + C^-1)^-1 = sum (-1)^n C (w2 C)^n``, truncated once the
    geometric remainder falls below ``tol``.
    """
    C = _check_spd(C, "C")
    w2 = np.asarray(w2, float)
    f = np.asarray(f, float)
    d = C.shape[0]
    K = w2 @ C
    q = _spectral(K)
    if q >= 1:
        raise SeriesDivergent(f"||w2 C|| = {q:.4f} >= 1")
    M = np.eye(d) + K
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise SeriesDivergent("det(1 + w2 C) not positive")
    shift = 0.5 * f @ np.linalg.solve(w2 + np.linalg.inv(C), f)
    closed = float(np.exp(-0.5 * logdet + shift))
    # series
    normC = _spectral(C)
    log_series, quad_series = 0.0, 0.5 * float(f @ C @ f)
    P, B = np.eye(d), C.copy()
    n = 0
    while True:
        n += 1
        P = P @ K
        B = C @ w2 @ B
        log_series += (-1) ** (n + 1) * np.trace(P) / n
        quad_series += 0.5 * (-1) ** n * float(f @ B @ f)
        rem = 0.5 * q ** (n + 1) / (1 - q) * (d / (n + 1) + normC * float(f @ f))
        if rem < tol or n >= max_terms:
            break
    series = float(np.exp(-0.5 * log_series + quad_series))
    return QuadraticPerturbation(closed, series, rem * series, n)


def quadratic_perturbation_wick(C, w2, f, order=40, tol=1e-16):
    """Brute force: Taylor-expand the exponential and integrate each power by Wick."""
    C = np.asarray(C, float)
    d = C.shape[0]
    X = -Poly.linear(f) - 0.5 * Poly.quadratic(w2)
    orc = MomentOracle(C)
    total, term = 1.0, Poly.const(d)
    for k in range(1, order + 1):
        term = term * X * (1.0 / k)
        v = orc.expect(term)
        total += v
        if abs(v) < tol * abs(total) and k > 4:
            break
    return total


# smooth cutoff ------------------------------------------------------------------
def smooth_cutoff(alpha, derivatives=False):
    """``chi = 1`` on ``|alpha| <= 1/2``, ``0`` on ``|alpha| >= 1``; C^2 quintic in between."""
    a = np.abs(np.asarray(alpha, float))
    t = np.clip(2 * a - 1, 0.0, 1.0)
    s = t ** 3 * (10 - 15 * t + 6 * t * t)
    chi = 1 - s
    if not derivatives:
        return chi
    inside = (t > 0) & (t < 1)
    ds = np.where(inside, 30 * t * t * (1 - t) ** 2, 0.0)
    d2s = np.where(inside, 60 * t * (1 - t) * (1 - 2 * t), 0.0)
    sgn = np.sign(np.asarray(alpha, float))
    return chi, -2 * ds * sgn, -4 * d2s


# constrained two-point function -------------------------------------------------
@dataclass
class TwoPointEstimate:
    value: float
    error: float
    exact: float
    acceptance: float
    samples: int

    @property
    def sigmas(self):
        return abs(self.value - self.exact) / self.error if self.error > 0 else (
            0.0 if self.value == self.exact else np.inf)


def chi_star(samples, p, C1=1.0, components=None):
    """``prod_x chi(|A0(x)| / (2 C1 p))`` over the sites of each sample.

    ``samples`` has shape ``(n, sites)`` or ``(n, sites, components)``.
    """
    s = np.asarray(samples)
    mag = np.abs(s) if s.ndim == 2 else np.sqrt((s ** 2).sum(axis=-1))
    if np.isinf(p):
        return np.ones(s.shape[0])
    return np.prod(smooth_cutoff(mag / (2 * C1 * p)), axis=1)


def constrained_twopoint(C, x, y, p, samples=1_000_000, seed=0, C1=1.0, batches=100, chunk=200_000):
    """Monte Carlo ``C_chi(x, y)`` with ``chi*`` as the weight on ``dmu_C`` samples.

    Errors come from batch means of the ratio estimator.
    """
    C = _check_spd(C, "C")
    d = C.shape[0]
    L = np.linalg.cholesky(C)
    rng = np.random.default_rng(seed)
    num = np.zeros(batches)
    den = np.zeros(batches)
    per = samples // batches
    if per == 0:
        raise ValueError("fewer samples than batches")
    done = 0
    b = 0
    while b < batches:
        take = max(1, min(chunk // per, batches - b))
        z = rng.standard_normal((take * per, d))
        a = z @ L.T
        w = chi_star(a, p, C1)
        prod = a[:, x] * a[:, y] * w
        num[b:b + take] = prod.reshape(take, per).mean(axis=1)
        den[b:b + take] = w.reshape(take, per).mean(axis=1)
        b += take
        done += take * per
    if den.mean() <= 1e-300:
        raise DegenerateDenominator("constrained normalisation underflows")
    value = num.mean() / den.mean()
    ratios = num / np.where(den > 0, den, np.nan)
    if np.any(~np.isfinite(ratios)):
        raise DegenerateDenominator("empty batch in the constrained normalisation")
    # delta-method error of the ratio of means
    g = (num - value * den) / den.mean()
    err = float(np.std(g, ddof=1) / np.sqrt(batches))
    return TwoPointEstimate(float(value), err, float(C[x, y]), float(den.mean()), done)


def chain_covariance(n=4, mass=1.0, periodic=False):
    """Covariance ``(-Delta + m^2)^-1`` of a short chain (test instance)."""
    T = np.diag(np.full(n, 2.0 + mass ** 2))
    for i in range(n - 1):
        T[i, i + 1] = T[i + 1, i] = -1.0
    if periodic and n > 2:
        T[0, -1] = T[-1, 0] = -1.0
    return np.linalg.inv(T)
