import itertools
import math

import numpy as np
import pytest

from rgw import polymer as pm
from rgw.grassmann import GeneratorSet, GrassmannElement, exp_even, product


@pytest.fixture
def line3():
    return pm.BlockSet.box((3, 1, 1))


def brute_mayer(E, dom):
    polys = sorted(E)
    out = {}
    for r in range(1, len(polys) + 1):
        for coll in itertools.combinations(polys, r):
            union = 0
            val = 1.0
            for X in coll:
                union |= X
                val *= np.expm1(E[X])
            out[union] = out.get(union, 0) + val
    return out


def brute_gas(K, dom):
    polys = sorted(K)
    total = 0.0
    for r in range(len(polys) + 1):
        for coll in itertools.combinations(polys, r):
            if all(not dom.touch(a, b) for a, b in itertools.combinations(coll, 2)):
                total += math.prod(K[X] for X in coll)
    return total


def test_blockset_basics():
    with pytest.raises(ValueError):
        pm.BlockSet([(0, 0, 0), (0, 0, 0)])
    with pytest.raises(pm.EnumerationCapExceeded):
        pm.BlockSet.box((13, 1, 1))
    line = pm.BlockSet.box((4, 1, 1))
    assert not line.touch(0b0001, 0b1000)
    ring = pm.BlockSet.box((4, 1, 1), period=4)
    assert ring.touch(0b0001, 0b1000)
    assert line.components(0b1011) == [0b0011, 0b1000]
    assert line.connected(0b0110) and not line.connected(0)
    # connected subsets of a line are its intervals
    assert len(line.polymers) == 10


def test_rho_truncated_golden(line3):
    assert pm.rho_truncated([0b001], line3) == 1
    assert pm.rho_truncated([0b001, 0b010], line3) == -1
    assert pm.rho_truncated([0b001, 0b100], line3) == 0
    # three pairwise touching: three trees (+1 each) and the triangle (-1)
    assert pm.rho_truncated([0b001, 0b010, 0b011], line3) == 2
    # a chain 1-2-3 with 1, 3 apart: only the path graph survives
    assert pm.rho_truncated([0b001, 0b010, 0b100], line3) == 1
    with pytest.raises(ValueError):
        pm.rho_truncated([], line3)
    with pytest.raises(pm.EnumerationCapExceeded):
        pm.rho_truncated([1] * 8, line3)


def test_mayer_expand_matches_brute_force(rng):
    dom = pm.BlockSet.box((2, 2, 1))
    E = pm.random_activity(dom, rng, 0.05, kappa=0.0)
    K0 = pm.mayer_expand(E, dom)
    ref = brute_mayer(E, dom)
    assert set(K0) == set(ref)
    assert max(abs(K0[X] - ref[X]) for X in ref) < 1e-15
    lhs, rhs = pm.mayer_identity(E, dom)
    assert abs(lhs - rhs) < 1e-13
    with pytest.raises(ValueError):
        pm.mayer_expand({0b1001: 0.1}, pm.BlockSet.box((4, 1, 1)))


def test_mayer_factorizes_on_disconnected_sets(rng):
    dom = pm.BlockSet([(0, 0, 0), (1, 0, 0), (3, 0, 0)])
    E = pm.random_activity(dom, rng, 0.05, kappa=0.0)
    K0 = pm.mayer_expand(E, dom)
    assert pm.factorization_residual(K0, dom) < 1e-15
    assert 0b101 in K0


def test_mayer_with_grassmann_values():
    gens = GeneratorSet.anonymous(4)
    dom = pm.BlockSet.box((2, 1, 1))
    E = {0b01: GrassmannElement.from_terms(gens, {(0, 1): 0.2}),
         0b10: GrassmannElement.from_terms(gens, {(2, 3): -0.3}),
         0b11: GrassmannElement.from_terms(gens, {(0, 3): 0.1, (): 0.05})}
    K0 = pm.mayer_expand(E, dom)
    lhs = GrassmannElement.one(gens)
    for v in E.values():
        lhs = product(lhs, exp_even(v))
    rhs = GrassmannElement.one(gens)
    for v in K0.values():
        rhs = rhs + v
    assert lhs.max_diff(rhs) < 1e-15


def test_gas_sum_matches_brute_force(rng):
    dom = pm.BlockSet.box((4, 1, 1))
    K = pm.random_activity(dom, rng, 0.05)
    assert abs(pm.gas_sum(K, dom) - brute_gas(K, dom)) < 1e-15


def test_exponentiation_matches_cluster_terms(rng):
    dom = pm.BlockSet.box((3, 1, 1))
    K = pm.random_activity(dom, rng, 0.05)
    ex = pm.exponentiate(K, dom)
    for n in (1, 2, 3):
        direct = pm.cluster_terms_direct(K, dom, n)
        got = ex.terms[n - 1]
        keys = set(direct) | set(got)
        assert max(abs(direct.get(X, 0) - got.get(X, 0)) for X in keys) < 1e-15
    lhs, rhs, _ = pm.exponentiation_identity(K, dom)
    assert abs(lhs - rhs) < 1e-12 * abs(rhs)
    assert pm.exponentiate({}, dom).E == {}


def test_exponentiation_inverts_mayer(rng):
    dom = pm.BlockSet.box((2, 2, 1))
    E = pm.random_activity(dom, rng, 0.05, kappa=0.0)
    K0 = pm.mayer_expand(E, dom)
    back = pm.exponentiate({X: v for X, v in K0.items() if dom.connected(X)}, dom).E
    assert max(abs(back.get(X, 0) - E.get(X, 0)) for X in set(back) | set(E)) < 1e-14


def test_exponentiation_diverges():
    dom = pm.BlockSet.box((3, 1, 1))
    K = {X: -5.0 for X in dom.polymers}
    with pytest.raises(pm.SeriesDivergent):
        pm.exponentiate(K, dom, max_order=30)


def test_random_activity_bound(rng):
    dom = pm.BlockSet.box((2, 2, 1))
    K = pm.random_activity(dom, rng, 0.05, kappa=1.0, complex_values=False)
    assert set(K) == set(dom.polymers)
    for X, v in K.items():
        assert isinstance(v, float)
        assert abs(v) <= 0.05 * math.exp(-(dom.size(X) - 1))


def test_polymer_sum_bound():
    b = pm.polymer_sum_bound(2.0, cap=3, period=4)
    assert b.counts == {1: 1, 2: 26, 3: 711}
    assert b.threshold == pytest.approx(2.3293, abs=1e-4)
    assert not b.holds
    assert pm.polymer_sum_bound(b.threshold + 1e-9).holds


def test_product_sum_bound():
    single = pm.product_sum_bound(0.1, 2.0, [(0, 0, 0)])
    assert single.lhs == pytest.approx(1 + 0.1 * math.exp(-2))
    assert single.enumerated and single.holds
    three = pm.product_sum_bound(0.1, 1.0, [(0, 0, 0), (1, 0, 0), (1, 1, 0)])
    assert three.holds
    # with at most 22 connected subsets the enumerated sum is the product over subsets
    n = len(pm.BlockSet([(0, 0, 0), (1, 0, 0), (1, 1, 0)]).polymers)
    assert three.lhs == pytest.approx((1 + 0.1 * math.exp(-1)) ** 3 * (1 + 0.1 * math.exp(-2)) ** 3
                                      * (1 + 0.1 * math.exp(-3)) ** (n - 6))
    with pytest.raises(pm.EnumerationCapExceeded):
        pm.product_sum_bound(0.1, 1.0, [(i, 0, 0) for i in range(7)])
