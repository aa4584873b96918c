"""Verification suites shared by the command line and the acceptance tests.

Each suite takes a ``WorkbenchConfig`` and returns ``CheckRow`` records; a
row passes when ``value <= threshold``.  Checks that are true/false are
reported as violation counts with threshold 0.
"""
from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import bosongauss as bg
from . import grassmann as gr
from . import perturbation as pt
from . import polymer as pm
from . import regions as rg
from .lattice import BondField, TorusLattice, gradient
from .operators import (CliffordRep, average_boson, average_boson_T, average_fermion,
                        average_fermion_T, charge_conjugation_check, dirac_matrix, gauge_phase)
from .randomwalk import LocalPropagator, build_parametrix, walk_errors
from .rgstep import (boson_translate_check, build_boson_kit, build_fermion_kit,
                     fermion_inverse_check, fermion_translate_check, roughness)


@dataclass
class CheckRow:
    suite: str
    check_id: str
    anchor: str
    value: float
    threshold: float
    passed: bool

    def to_dict(self):
        return asdict(self)


class _Rows(list):
    def __init__(self, suite, cfg):
        super().__init__()
        self.suite, self.cfg = suite, cfg

    def add(self, check_id, anchor, value, tol_key=None, threshold=None):
        thr = self.cfg.tol(tol_key) if threshold is None else threshold
        value = float(value)
        self.append(CheckRow(self.suite, check_id, anchor, value, float(thr),
                             bool(np.isfinite(value) and value <= thr)))


def _rng(cfg, tag):
    return np.random.default_rng([cfg.seed, zlib.crc32(tag.encode())])


def _spmax(m):
    m = sp.csr_matrix(m)
    return float(np.abs(m.data).max()) if m.nnz else 0.0


def _lattice(cfg):
    return TorusLattice(cfg.lattice["side"], cfg.lattice["L"])


def _rough_field(lat, rng, e0, target):
    """Random bond field rescaled to ``e0 max|dA| = target``."""
    A = BondField.random(lat, rng)
    return A * (target / roughness(lat, A, e0))


# criteria 1-3 -----------------------------------------------------------------
def suite_operators(cfg, fields=10):
    rows = _Rows("operators", cfg)
    lat = _lattice(cfg)
    par = cfg.params()
    e0 = par.e0
    rep = CliffordRep(par.wilson_r)
    rng = _rng(cfg, "operators")
    nc = lat.coarse().nsites
    Q, QT = average_boson(lat), average_boson_T(lat)
    alg = max(_spmax(Q @ QT - sp.identity(nc)), _spmax((QT @ Q) @ (QT @ Q) - QT @ Q))
    gauge = 0.0
    for _ in range(fields):
        A = BondField.random(lat, rng)
        qp, qm = average_fermion(lat, A, e0), average_fermion(lat, -A, e0)
        qpT = average_fermion_T(lat, A, e0)
        P = qpT @ qm
        alg = max(alg, _spmax(qm @ qpT - sp.identity(4 * nc)), _spmax(P @ P - P))
        lam = rng.standard_normal(lat.nsites)
        Ag = A - gradient(lat, lam)
        g = sp.diags(gauge_phase(lat, lam, e0))
        gi = sp.diags(np.conj(gauge_phase(lat, lam, e0)))
        D, Dg = dirac_matrix(lat, A, e0, rep), dirac_matrix(lat, Ag, e0, rep)
        gauge = max(gauge, _spmax(Dg - g @ D @ gi))
        centres = lat.index(lat.L * lat.coarse().coords)
        gc = sp.diags(gauge_phase(lat, lam[centres], e0))
        gauge = max(gauge, _spmax(average_fermion(lat, Ag, e0) - gc @ qp @ gi))
    rows.add("averaging-algebra", "block averages: QQ^T = I, projection, Q(-A)Q(A)^T = I", alg, "averaging")
    res = rep.residuals()
    rows.add("clifford", "gamma anticommutators and charge conjugation", max(res.values()), "clifford")
    rows.add("hop-conjugation", "C^T gamma_xx' C = gamma_x'x^T", rep.hop_conjugation_residual(), "clifford")
    ok, cres = charge_conjugation_check(lat, BondField.random(lat, rng), e0, rep)
    rows.add("dirac-conjugation", "C^T D(-A) C = D(A)^T", cres, "gauge")
    rows.add("gauge-covariance", "D and Q under A -> A - d lambda", gauge, "gauge")
    return rows


# criterion 4 ------------------------------------------------------------------
def suite_rgstep(cfg, pairs=20):
    rows = _Rows("rgstep", cfg)
    lat = _lattice(cfg)
    par = cfg.params()
    rep = CliffordRep(par.wilson_r)
    rng = _rng(cfg, "rgstep")
    bk = build_boson_kit(lat, par)
    worst = 0.0
    for _ in range(pairs):
        A = rng.standard_normal((3, lat.coarse().nsites))
        A0 = rng.standard_normal((3, lat.nsites))
        r, s = boson_translate_check(bk, A, A0)
        worst = max(worst, r / s)
    rows.add("boson-diagonalization", "boson translation diagonalizes the quadratic form", worst, "boson_diag")
    worst_t = worst_i = 0.0
    for _ in range(pairs):
        At = _rough_field(lat, rng, par.e0, 1e-3)
        fk = build_fermion_kit(lat, par, At, rep, threshold=cfg.roughness)
        res, _ = fermion_translate_check(fk)
        scale = max(np.abs(fk.w_c * fk.d_tilde1).max(), _spmax(fk.w_f * fk.d_sharp))
        worst_t = max(worst_t, res / scale)
        r, s = fermion_inverse_check(fk, rng)
        worst_i = max(worst_i, r / s)
    rows.add("fermion-diagonalization", "fermion translation at e0|dA| = 1e-3", worst_t, "fermion_diag")
    rows.add("fermion-inverse", "undoing the fermion translation", worst_i, "fermion_diag")
    return rows


# criterion 5 ------------------------------------------------------------------
def suite_walk(cfg, max_len=6):
    rows = _Rows("walk", cfg)
    lt = cfg.lattice
    par = cfg.params()
    big = TorusLattice(lt["walk_side"], lt["L"])
    kit = build_boson_kit(big, par, dense=False)
    walk = build_parametrix(kit, lt["walk_M0"])
    normR, normG, errs = walk_errors(walk, max_len, tol=1e-4)
    rows.add("norm-R", "walk expansion remainder ||R|| < 1", normR, "walk_norm")
    for r in errs:
        rows.add(f"partial-sum-{r.n}", f"||G^(n) - G|| against ||G*|| ||R||^(n+1) / (1 - ||R||), n={r.n}",
                 r.error, threshold=r.bound)
    # locality of the local propagators on the small lattice
    lat = _lattice(cfg)
    rloc = float(lt["r_loc"])
    dist = lat.distance_matrix
    rep = CliffordRep(par.wilson_r)
    At = _rough_field(lat, _rng(cfg, "walk"), par.e0, 1e-3)
    for name, k in (("boson", build_boson_kit(lat, par)),
                    ("fermion", build_fermion_kit(lat, par, At, rep, threshold=cfg.roughness))):
        G = LocalPropagator(build_parametrix(k, lt["M0"]), rloc).matrix().tocoo()
        blk = 4 if name == "fermion" else 1
        far = dist[G.row // blk, G.col // blk] >= rloc / 2
        rows.add(f"local-support-{name}", "local propagator vanishes for d(x,y) >= r_loc/2",
                 int(np.count_nonzero(G.data[far])), "local_support")
    return rows


# criterion 6 ------------------------------------------------------------------
def suite_grassmann(cfg):
    rows = _Rows("grassmann", cfg)
    rng = _rng(cfg, "grassmann")
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 11))
        F = gr.GrassmannElement.random(n, rng, 8)
        G = gr.GrassmannElement.random(n, rng, 8)
        h = float(rng.uniform(0.2, 2.0))
        worst = max(worst, (F * G).norm(h) - F.norm(h) * G.norm(h))
    rows.add("submultiplicative", "||FG||_h <= ||F||_h ||G||_h", max(worst, 0.0), "submultiplicative")
    gens = gr.GeneratorSet.from_sites(range(4))
    xs, xb = gens.select(0, 0), gens.select(0, 1)
    Gam = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    cov = gr.CovarianceData(Gam, xs, xb)
    Dinv = np.linalg.inv(Gam)
    worst = 0.0
    for k in range(4):
        for a in itertools.combinations(xs, k):
            for b in itertools.combinations(xb, k):
                F = gr.GrassmannElement.from_terms(gens, {a + b: 1.0})
                v1 = gr.gaussian_integral(F, cov)
                v2 = gr.berezin_integral(F, Dinv, xs, xb).scalar()
                worst = max(worst, abs(v1 - v2))
    rows.add("gaussian-vs-berezin", "determinant formula against full Berezin integral", worst, "gauss_berezin")
    h = math.sqrt(cov.norm2)
    worst = 0.0
    for _ in range(100):
        F = gr.GrassmannElement.random(gens, rng, 10)
        worst = max(worst, abs(gr.gaussian_integral(F, cov)) / F.norm(h))
    rows.add("hadamard", "|int F| / ||F||_h at h = sqrt(||Gamma||^(2))", worst, "hadamard")
    g, r, c = gr.split_generators(3)
    worst = 0.0
    for _ in range(20):
        T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        lam = np.array([True, False, True])
        F = gr.GrassmannElement.random(g, rng, 8)
        Hm = gr.GrassmannElement.random(g.subset([r[1], c[1]]), rng, 3)
        H = gr.GrassmannElement(g, {(1 << r[1] if m & 1 else 0) | (1 << c[1] if m & 2 else 0): v
                                    for m, v in Hm.terms.items()})
        lhs, rhs = gr.conditional_identity(T, lam, F, H)
        worst = max(worst, abs(lhs - rhs))
    rows.add("fermion-split", "fermionic conditional split on 3+3 generators", worst, "fermion_split")
    return rows


# criteria 7, 11 --------------------------------------------------------------------
def suite_gauss(cfg):
    rows = _Rows("gauss", cfg)
    rng = _rng(cfg, "gauss")
    worst = 0.0
    for _ in range(50):
        X = rng.standard_normal((6, 6))
        T = X @ X.T + 6 * np.eye(6)
        lam = rng.random(6) < 0.5
        F = bg.Poly.random(6, rng, 4, 8)
        Hv = [i for i in range(6) if not lam[i]]
        H = bg.Poly.const(6, rng.standard_normal())
        for _ in range(3):
            if Hv:
                i, j = rng.choice(Hv, 2)
                H = H + bg.Poly.var(6, int(i)) * bg.Poly.var(6, int(j)) * rng.standard_normal()
        worst = max(worst, bg.conditional_split(T, lam, F, H).relative)
    rows.add("boson-split", "bosonic conditional split via the Wick oracle", worst, "boson_split")
    worst = 0.0
    for _ in range(5):
        X = rng.standard_normal((4, 4))
        C = np.linalg.inv(X @ X.T + 4 * np.eye(4))
        Y = rng.standard_normal((4, 4))
        w2 = 0.05 * (Y + Y.T)
        f = 0.3 * rng.standard_normal(4)
        q = bg.quadratic_perturbation(C, w2, f)
        wick = bg.quadratic_perturbation_wick(C, w2, f)
        scale = abs(q.closed)
        worst = max(worst, abs(q.closed - q.series) / scale, abs(q.closed - wick) / scale)
    rows.add("quadratic-perturbation", "closed form, series and Wick agree", worst, "quadratic")
    return rows


TWOPOINT_P = (0.5, 1.0, 2.0)


def suite_twopoint(cfg, samples=1_000_000):
    rows = _Rows("twopoint", cfg)
    C = bg.chain_covariance(4)
    free = bg.constrained_twopoint(C, 0, 1, np.inf, samples=samples, seed=cfg.seed)
    rows.add("unconstrained-limit", "C_chi -> C without constraint, in estimator sigmas",
             free.sigmas, "twopoint_sigmas")
    gaps = [abs(bg.constrained_twopoint(C, 0, 1, p, samples=samples, seed=cfg.seed).value - C[0, 1])
            for p in TWOPOINT_P]
    bad = sum(1 for a, b in zip(gaps, gaps[1:]) if not b < a)
    rows.add("monotone-in-p", "|C_chi - C| decreases over increasing p(e0)", bad, threshold=0)
    return rows


# criterion 8 ----------------------------------------------------------------------
BRUTE_PAIRS = ((0, 0), (5, 0), (100, 7), (0, 728))


def suite_counterterm(cfg):
    rows = _Rows("counterterm", cfg)
    lat = _lattice(cfg)
    par = cfg.params()
    rep = CliffordRep(par.wilson_r)
    sig = pt.sigma0(lat, par, rep)
    sig2 = pt.sigma0(lat, cfg.params(e=2 * par.e), rep)
    nz = np.abs(sig.matrix) > 1e-14 * np.abs(sig.matrix).max()
    rows.add("quadratic-in-e0", "Sigma0(2e)/Sigma0(e) = 4", float(np.abs(sig2.matrix[nz] / sig.matrix[nz] - 4).max()),
             "quadratic_ratio")
    rep_ = pt.dm0(sig, par, rep)
    rows.add("dm0-spread", "dm0(x) independent of x (relative)", rep_.spread, "dm_spread")
    rows.add("self-contraction", "excluded self-contraction trace cancels", rep_.self_trace, "self_trace")
    pairs = [(x, y) for x, y in BRUTE_PAIRS if x < lat.nsites and y < lat.nsites]
    bf = pt.sigma0_bruteforce(lat, par, pairs, rep)
    worst = max(float(np.abs(v - sig.block(x, y)).max()) for (x, y), v in bf.items())
    rows.add("bruteforce-contraction", "contraction oracle against Sigma0, entrywise", worst, "bruteforce")
    return rows


# criterion 9 -----------------------------------------------------------------------
def suite_ptheory(cfg):
    rows = _Rows("ptheory", cfg)
    lat = _lattice(cfg)
    par = cfg.params()
    rep = CliffordRep(par.wilson_r)
    rng = _rng(cfg, "ptheory")
    reg = pt.theta_region(lat, [0, 1])
    ker = pt.DressedKernels.random(reg, 2, rng)
    At = 0.01 * rng.standard_normal((3, lat.nsites))
    for tag, field in (("zero", None), ("random", At)):
        p = pt.p_theta(reg, par, ker, field, rep)
        _, rel = p.residual()
        rows.add(f"seven-diagram-{tag}", f"diagram formula against Wick evaluation, A~ {tag}", rel, "ptheta")
        sc = pt.scale_p(p, par, rep)
        rows.add(f"scaling-{tag}", f"scaled P_Theta against the next-scale evaluation, A~ {tag}",
                 sc.relative, "scaling")
    return rows


# criterion 10 ----------------------------------------------------------------------
def suite_polymer(cfg):
    rows = _Rows("polymer", cfg)
    rng = _rng(cfg, "polymer")
    domains = {"line3": pm.BlockSet.box((3, 1, 1)), "square2x2": pm.BlockSet.box((2, 2, 1)),
               "line4": pm.BlockSet.box((4, 1, 1)), "ell3": pm.BlockSet([(0, 0, 0), (1, 0, 0), (3, 0, 0)])}
    mayer = expo = roundtrip = 0.0
    for dom in domains.values():
        for _ in range(3):
            E = pm.random_activity(dom, rng, 0.05, kappa=0.0)
            lhs, rhs = pm.mayer_identity(E, dom)
            mayer = max(mayer, abs(lhs - rhs) / abs(lhs))
            K0 = pm.mayer_expand(E, dom)
            mayer = max(mayer, pm.factorization_residual(K0, dom))
            K = pm.random_activity(dom, rng, 0.05, kappa=1.0)
            lhs, rhs, _ = pm.exponentiation_identity(K, dom)
            expo = max(expo, abs(lhs - rhs) / abs(rhs))
            Kc = {X: v for X, v in K0.items() if dom.connected(X)}
            back = pm.exponentiate(Kc, dom).E
            roundtrip = max(roundtrip, max(abs(back.get(X, 0) - E.get(X, 0)) for X in set(back) | set(E)))
    rows.add("mayer-identity", "prod e^E = sum K0 with factorization", mayer, "mayer")
    rows.add("exponentiation-identity", "exp(sum E~) = polymer gas sum", expo, "exponentiation")
    rows.add("exponentiation-roundtrip", "exponentiating the Mayer activities returns E", roundtrip, "exponentiation")
    line = domains["line3"]
    golden = [(pm.rho_truncated([0b001], line), 1), (pm.rho_truncated([0b001, 0b010], line), -1),
              (pm.rho_truncated([0b001, 0b100], line), 0), (pm.rho_truncated([0b001] * 3, line), 2)]
    rows.add("rho-golden", "rho^T for n=1, touching pair, disjoint pair, three touching",
             sum(1 for v, w in golden if v != w), "rho_golden")
    bad = 0
    for alpha in (0.01, 0.1):
        for kappa in (1.0, 2.0, 5.0):
            for X in ([(0, 0, 0)], [(0, 0, 0), (1, 0, 0)], [(0, 0, 0), (1, 0, 0), (1, 1, 0)]):
                bad += not pm.product_sum_bound(alpha, kappa, X).holds
    single = pm.product_sum_bound(0.1, 2.0, [(0, 0, 0)])
    bad += abs(single.lhs - (1 + 0.1 * math.exp(-2))) > 1e-15
    rows.add("productsum-bound", "collection sum <= exp(sum) <= exp(alpha |X|)", bad, "bounds")
    b = pm.polymer_sum_bound(2.0, cap=3, period=4)
    hi = pm.polymer_sum_bound(b.threshold + 0.5, cap=3, period=4)
    rows.add("polymer-sum-bound", "sum over polymers containing a block <= 1 above the threshold kappa",
             int(not hi.holds) + int(b.threshold <= 0), "bounds")
    return rows


# criterion 12 --------------------------------------------------------------------
def suite_regions(cfg, instances=200):
    rows = _Rows("regions", cfg)
    lat = _lattice(cfg)
    par = cfg.params()
    kit = build_boson_kit(lat, par)
    st = rg.restriction_stability(kit, par.p_e0, seed=cfg.seed, instances=instances)
    finite = all(math.isfinite(v) for v in st.batch_max_C1 + st.batch_max_C2)
    rows.add("constants-finite", "measured C1, C2 finite", int(not finite), threshold=0)
    rows.add("C1-stability", "batch maxima of C1 within tolerance", st.spread_C1, "restriction_spread")
    rows.add("C2-stability", "batch maxima of C2 within tolerance", st.spread_C2, "restriction_spread")
    zero = rg.restriction_lemma_check(kit, None, np.zeros((3, lat.coarse().nsites)),
                                      np.zeros((3, lat.nsites)), par.p_e0)
    rows.add("zero-field", "zero fields give zero constants", max(zero.C1, zero.C2, zero.key), threshold=0)
    return rows


SUITES = {
    "operators": suite_operators,
    "rgstep": suite_rgstep,
    "walk": suite_walk,
    "grassmann": suite_grassmann,
    "gauss": suite_gauss,
    "twopoint": suite_twopoint,
    "counterterm": suite_counterterm,
    "ptheory": suite_ptheory,
    "polymer": suite_polymer,
    "regions": suite_regions,
}


def run_suite(name, cfg, **kw):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    return list(SUITES[name](cfg, **kw))
