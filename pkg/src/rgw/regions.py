"""Small-field regions: the cutoff products chi0, chi*, zeta* and the field restriction lemma.

Boson fields follow the conventions of ``rgstep``: ``A`` lives on the coarse
lattice with shape ``(3, Nc)``, ``A0`` and ``A~ = H1_loc A`` on the fine one
with shape ``(3, N)``.  Pointwise sizes are Euclidean norms over components
(``|dA(x)|`` over all ``(mu, nu)``).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bosongauss import smooth_cutoff
from .lattice import LatticeError, RegionMask
from .operators import apply_components
from .rgstep import ExactLocal, _coarse_mask

MAX_ZETA_SITES = 20


class HypothesisViolated(ValueError):
    pass


def _grad_norm(lattice, values, mask=None):
    """``|dF(x)|`` with forward differences; bonds leaving ``mask`` are dropped."""
    values = np.asarray(values, float)
    sq = np.zeros(lattice.nsites)
    for nu in range(3):
        fw = lattice.forward(nu)
        d = (values[:, fw] - values) / lattice.spacing
        if mask is not None:
            d = d * (mask & mask[fw])
        sq += np.sum(d * d, axis=0)
    return np.sqrt(sq)


def _norm(values):
    return np.sqrt(np.sum(np.asarray(values, float) ** 2, axis=0))


@dataclass
class FieldConstraintSet:
    """The three small-field inequalities on a region, as ratios to their thresholds.

    ``region`` is a ``RegionMask`` of the fine lattice (``None``: everywhere).
    """
    lattice: object
    p: float
    mu0: float
    region: object = None

    def _masks(self):
        if self.region is None:
            return (np.ones(self.lattice.nsites, bool),
                    np.ones(self.lattice.coarse().nsites, bool))
        return self.region.sites, _coarse_mask(self.lattice, self.region)

    def ratios(self, A, A0):
        """``(|dA0|/p, |A0|/(p/mu0), |A - Q A0|/p)``; zero off the region."""
        from .operators import average_boson
        fine, coarse = self._masks()
        A, A0 = np.asarray(A, float), np.asarray(A0, float)
        r1 = _grad_norm(self.lattice, A0) / self.p
        r2 = _norm(A0) * self.mu0 / self.p
        r3 = _norm(A - apply_components(average_boson(self.lattice), A0)) / self.p
        return r1 * fine, r2 * fine, r3 * coarse

    def holds(self, A, A0, factor=1.0):
        return all(float(r.max(initial=0.0)) <= factor for r in self.ratios(A, A0))

    def factors(self, A, A0):
        return tuple(smooth_cutoff(r) for r in self.ratios(A, A0))

    def chi0(self, A, A0):
        return float(np.prod([np.prod(f) for f in self.factors(A, A0)]))

    def half_violations(self, A, A0, block_side):
        """Blocks holding a site where some inequality fails at half strength.

        This indicator stands in for the large-field factor when generating
        test configurations.
        """
        labels, nb = self.lattice.block_partition(block_side)
        r1, r2, r3 = self.ratios(A, A0)
        bad = (r1 > 0.5) | (r2 > 0.5) | (r3 > 0.5)[self.lattice.block_labels]
        out = np.zeros(nb ** 3, bool)
        np.logical_or.at(out, labels, bad)
        return out


def chi0(region, A, A0, p, mu0, lattice=None):
    """Product over the region of the three cutoff factors."""
    lattice = lattice if lattice is not None else region.lattice
    return FieldConstraintSet(lattice, p, mu0, region).chi0(A, A0)


def chi0_direct(lattice, region, A, A0, p, mu0):
    """Site-by-site loop evaluation of ``chi0`` (oracle)."""
    from .operators import average_boson
    A, A0 = np.asarray(A, float), np.asarray(A0, float)
    fine = region.sites if region is not None else np.ones(lattice.nsites, bool)
    coarse = _coarse_mask(lattice, region)
    QA0 = apply_components(average_boson(lattice), A0)
    val = 1.0
    for x in range(lattice.nsites):
        if not fine[x]:
            continue
        g = 0.0
        for nu in range(3):
            xp = lattice.forward(nu)[x]
            for mu in range(3):
                g += ((A0[mu, xp] - A0[mu, x]) / lattice.spacing) ** 2
        val *= float(smooth_cutoff(math.sqrt(g) / p))
        val *= float(smooth_cutoff(math.sqrt(sum(A0[mu, x] ** 2 for mu in range(3))) * mu0 / p))
    for y in range(lattice.coarse().nsites):
        if coarse[y]:
            d = math.sqrt(sum((A[mu, y] - QA0[mu, y]) ** 2 for mu in range(3)))
            val *= float(smooth_cutoff(d / p))
    return val


# restriction lemma ------------------------------------------------------------
@dataclass
class RestrictionReport:
    C1_grad_A: float        # max |dA| / p on Omega'
    C1_A: float             # max |A| mu0 / p on Omega'
    key: float              # max |A~ - Q^T A| / p on Omega''
    C1_A0: float            # max |A0| / p on Omega''
    C2_grad: float          # max |dA~| / p on Omega''
    C2_value: float         # max |A~| mu0 / p on Omega''
    hypothesis_margin: float

    @property
    def C1(self):
        return max(self.C1_grad_A, self.C1_A, self.C1_A0)

    @property
    def C2(self):
        return max(self.C2_grad, self.C2_value)

    def finite(self):
        return all(math.isfinite(v) for v in (self.C1, self.C2, self.key))


def _tilde(kit, A, coarse_mask, local):
    local = local or ExactLocal(kit)
    v = np.asarray(A, float) * coarse_mask
    return kit.k * local.apply((kit.QT @ v.T)).T


def restriction_lemma_check(kit, region, A, A0, p, local=None):
    """Check the hypothesis on ``Omega'`` and measure the constants of the four conclusions.

    ``A~ = H1_loc (A on Omega')`` with ``H1_loc = k C_loc Q^T``; ``local``
    supplies ``C_loc`` (default: the exact covariance).
    """
    lat = kit.lattice
    mu0 = kit.params.mu0
    region = region if region is not None else RegionMask.full(lat, lat.L)
    r1, r2 = region.shrink(1), region.shrink(2)
    if not r2.blocks.size:
        raise LatticeError("Omega'' is empty")
    c1 = _coarse_mask(lat, r1)
    A, A0 = np.asarray(A, float), np.asarray(A0, float)
    At = _tilde(kit, A, c1, local)
    check = At + A0
    hyp = FieldConstraintSet(lat, p, mu0, r1)
    margin = max(float(r.max(initial=0.0)) for r in hyp.ratios(A, check))
    if margin > 1.0:
        raise HypothesisViolated(f"small-field inequalities fail on Omega' (worst ratio {margin:.4g})")
    cl = lat.coarse()
    f2 = r2.sites
    grad_A = _grad_norm(cl, A, c1)[c1]
    key = _norm(At - apply_components(kit.QT, A))[f2]
    return RestrictionReport(
        C1_grad_A=float(grad_A.max(initial=0.0)) / p,
        C1_A=float(_norm(A)[c1].max(initial=0.0)) * mu0 / p,
        key=float(key.max(initial=0.0)) / p,
        C1_A0=float(_norm(A0)[f2].max(initial=0.0)) / p,
        C2_grad=float(_grad_norm(lat, At, f2)[f2].max(initial=0.0)) / p,
        C2_value=float(_norm(At)[f2].max(initial=0.0)) * mu0 / p,
        hypothesis_margin=margin,
    )


def admissible_instance(kit, region, p, rng, smoothing=2, fill=0.9, local=None):
    """Random ``(A, A0)`` satisfying the hypothesis on ``Omega'``.

    A smooth fine field ``A_check`` is drawn and scaled under the first two
    thresholds, ``A = Q A_check + noise`` with ``|noise| <= fill p``, and
    ``A0 = A_check - A~`` so that ``A~ + A0 = A_check``.
    """
    lat = kit.lattice
    mu0 = kit.params.mu0
    region = region if region is not None else RegionMask.full(lat, lat.L)
    c1 = _coarse_mask(lat, region.shrink(1))
    f = rng.standard_normal((3, lat.nsites))
    for _ in range(smoothing):
        f = np.stack([kit.solver.solve(f[m]) for m in range(3)])
    g = float(_grad_norm(lat, f).max())
    v = float(_norm(f).max())
    scale = fill * rng.uniform(0.2, 1.0) * min(p / max(g, 1e-300), p / (mu0 * max(v, 1e-300)))
    check = scale * f
    noise = rng.standard_normal((3, lat.coarse().nsites))
    noise *= fill * rng.uniform(0.2, 1.0) * p / float(_norm(noise).max())
    A = apply_components(kit.Q, check) + noise
    A0 = check - _tilde(kit, A, c1, local)
    return A, A0


@dataclass
class StabilityReport:
    batch_max_C1: tuple
    batch_max_C2: tuple
    batch_max_key: tuple
    instances: int

    @staticmethod
    def _spread(pair):
        a, b = pair
        return abs(a - b) / max(a, b) if max(a, b) > 0 else 0.0

    @property
    def spread_C1(self):
        return self._spread(self.batch_max_C1)

    @property
    def spread_C2(self):
        return self._spread(self.batch_max_C2)

    def stable(self, tol=0.2):
        return self.spread_C1 <= tol and self.spread_C2 <= tol


def restriction_stability(kit, p, seed=0, instances=200, region=None, local=None):
    """Measured constants over two independent batches of random admissible instances."""
    batches = []
    for b in range(2):
        rng = np.random.default_rng([seed, b])
        reps = []
        for _ in range(instances // 2):
            A, A0 = admissible_instance(kit, region, p, rng, local=local)
            reps.append(restriction_lemma_check(kit, region, A, A0, p, local))
        batches.append(reps)
    return StabilityReport(
        tuple(max(r.C1 for r in reps) for reps in batches),
        tuple(max(r.C2 for r in reps) for reps in batches),
        tuple(max(r.key for r in reps) for reps in batches),
        instances,
    )


# zeta* ----------------------------------------------------------------------
@dataclass
class ZetaStar:
    value: float
    enumerated: float | None
    log_rhs: float          # -gamma C1^2 p^2 |P| + gamma ||A0||_P^2
    norm2: float

    @property
    def holds(self):
        return self.value == 0.0 or math.log(abs(self.value)) <= self.log_rhs + 1e-12


def _chi_star_sites(A0, p, C1):
    return smooth_cutoff(_norm(A0) / (2 * C1 * p))


def zeta_star(lattice, block_side, P, A0, p, C1=1.0, gamma=1.0, enumerate_sites=True):
    """``sum over site sets Q with block closure P of prod_{x in Q} (chi(|A0(x)|/(2 C1 p)) - 1)``.

    The sum factorizes over the blocks of ``P`` into ``prod_B (prod_{x in B}
    chi_x - 1)``; with ``enumerate_sites`` it is also summed subset by subset
    (sites with ``chi = 1`` contribute zero and are skipped), capped at
    ``MAX_ZETA_SITES`` active sites.
    """
    labels, _ = lattice.block_partition(block_side)
    P = sorted(int(b) for b in P)
    chi = _chi_star_sites(A0, p, C1)
    value = 1.0
    for b in P:
        value *= float(np.prod(chi[labels == b])) - 1.0
    enumerated = None
    if enumerate_sites:
        active = [x for x in np.flatnonzero(np.isin(labels, P)) if chi[x] != 1.0]
        if len(active) > MAX_ZETA_SITES:
            raise ValueError(f"{len(active)} active sites exceed the enumeration cap {MAX_ZETA_SITES}")
        target = set(P)
        enumerated = 0.0
        for r in range(len(active) + 1):
            for Q in itertools.combinations(active, r):
                if {int(labels[x]) for x in Q} != target:
                    continue
                enumerated += math.prod(float(chi[x]) - 1.0 for x in Q)
    sel = np.isin(labels, P)
    norm2 = float(np.sum(np.asarray(A0, float)[:, sel] ** 2))
    log_rhs = -gamma * C1 ** 2 * p ** 2 * len(P) + gamma * norm2
    return ZetaStar(value, enumerated, log_rhs, norm2)
