import itertools
import json

import numpy as np
import pytest

from rgw.grassmann import (CovarianceData, DimensionMismatch, ExpansionTooLarge,
                           GeneratorMismatch, GeneratorSet, GrassmannElement, SingularTLambda,
                           berezin_integral, change_of_variables, conditional_identity,
                           conditional_means, exp_even, fermion_conditional, gaussian_integral,
                           hadamard_ratio, matrix_representation, one_norm,
                           partial_gaussian_integral, product, sigma, split_generators)


def brute_product(F, G):
    """Monomial-by-monomial product with explicit reordering."""
    out = {}
    for a, x in F.terms.items():
        for b, y in G.terms.items():
            seq = [i for i in range(64) if a >> i & 1] + [i for i in range(64) if b >> i & 1]
            if len(set(seq)) < len(seq):
                continue
            inv = sum(1 for i, j in itertools.combinations(range(len(seq)), 2) if seq[i] > seq[j])
            out[a | b] = out.get(a | b, 0) + (-1) ** inv * x * y
    return GrassmannElement(F.gens, out)


def family_gens(n):
    gens = GeneratorSet.from_sites(range(n))
    return gens, gens.select(0, 0), gens.select(0, 1)


def test_unit_and_nilpotency():
    g = GeneratorSet.anonymous(4)
    G = GrassmannElement.random(g, np.random.default_rng(0))
    assert product(GrassmannElement.one(g), G).allclose(G)
    psi = GrassmannElement.generator(g, 1)
    assert product(psi, psi).terms == {}


def test_product_matches_oracles_and_is_submultiplicative(rng):
    g = GeneratorSet.anonymous(8)
    for _ in range(20):
        F = GrassmannElement.random(g, rng, n_terms=8)
        G = GrassmannElement.random(g, rng, n_terms=8)
        FG = product(F, G)
        assert FG.max_diff(brute_product(F, G)) < 1e-13
        rep = matrix_representation(F) @ matrix_representation(G)
        assert np.abs(matrix_representation(FG) - rep).max() < 1e-12
        for h in (0.5, 1.0, 2.0):
            assert FG.norm(h) <= F.norm(h) * G.norm(h) * (1 + 1e-12)


def test_product_is_associative(rng):
    g = GeneratorSet.anonymous(7)
    F, G, H = (GrassmannElement.random(g, rng, n_terms=6) for _ in range(3))
    assert product(product(F, G), H).max_diff(product(F, product(G, H))) < 1e-12


def test_generator_mismatch():
    a = GrassmannElement.one(GeneratorSet.anonymous(3))
    b = GrassmannElement.one(GeneratorSet.anonymous(4))
    with pytest.raises(GeneratorMismatch):
        product(a, b)
    with pytest.raises(GeneratorMismatch):
        GrassmannElement.from_terms(3, {(5,): 1.0})


def test_antisymmetric_storage():
    g = GeneratorSet.anonymous(4)
    F = GrassmannElement.from_terms(g, {(2, 0): 1.5, (0, 2): 0.5, (1, 1): 9.0})
    assert F.coefficient((0, 2)) == pytest.approx(-1.0)
    assert F.coefficient((2, 0)) == pytest.approx(1.0)
    assert F.kernel_l1(2) == pytest.approx(2.0)
    assert F.norm(3.0) == pytest.approx(9.0)


def test_exp_even_matches_series(rng):
    g = GeneratorSet.anonymous(6)
    S = GrassmannElement.from_terms(g, {(0, 1): 0.3, (2, 3): -0.7j, (4, 5): 1.1})
    E = exp_even(S)
    # the pairs commute, so exp factorises
    expect = GrassmannElement.one(g)
    for pair, c in (((0, 1), 0.3), ((2, 3), -0.7j), ((4, 5), 1.1)):
        expect = product(expect, GrassmannElement.one(g) + GrassmannElement.from_terms(g, {pair: c}))
    assert E.max_diff(expect) < 1e-14
    with pytest.raises(ValueError):
        exp_even(GrassmannElement.generator(g, 0))


def test_json_roundtrip(rng):
    gens, _, _ = family_gens(3)
    F = GrassmannElement.random(gens, rng)
    doc = json.loads(F.to_json())
    assert len(doc["terms"]) == len(F)
    assert GrassmannElement.from_json(F.to_json()).max_diff(F) == 0


def test_change_of_variables(rng):
    g = GeneratorSet.anonymous(6)
    F = GrassmannElement.random(g, rng, n_terms=10)
    assert change_of_variables(F, np.eye(6)).max_diff(F) < 1e-15
    perm = np.eye(6)[rng.permutation(6)]
    assert change_of_variables(F, perm).norm(1.3) == pytest.approx(F.norm(1.3))
    with pytest.raises(DimensionMismatch):
        change_of_variables(F, np.eye(5))


def test_change_of_variables_norm_bound(rng):
    g = GeneratorSet.anonymous(6)
    h = 1.0
    for _ in range(100):
        A = rng.standard_normal((6, 6))
        A *= 2.0 / one_norm(A)
        F = GrassmannElement.random(g, rng, n_terms=6)
        assert change_of_variables(F, A).norm(h / 2) <= F.norm(h) * (1 + 1e-12)


def test_gaussian_integral_small_cases(rng):
    gens, rows, cols = family_gens(2)
    Gam = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    cov = CovarianceData(Gam, rows, cols)
    assert gaussian_integral(GrassmannElement.one(gens), cov) == 1
    x, xb = rows[0], cols[1]
    mono = GrassmannElement.from_terms(gens, {(x, xb): 1.0})
    assert gaussian_integral(mono, cov) == pytest.approx(Gam[0, 1])
    # golden n = 2 sign: Psi(x1) Psibar(xb1) Psi(x2) Psibar(xb2) gives det
    four = GrassmannElement.from_terms(gens, {(rows[0], cols[0], rows[1], cols[1]): 1.0})
    det = Gam[0, 0] * Gam[1, 1] - Gam[0, 1] * Gam[1, 0]
    assert gaussian_integral(four, cov) == pytest.approx(det)
    assert sigma(2) == -1 and sigma(1) == 1


def test_gaussian_integral_matches_berezin(rng):
    gens, rows, cols = family_gens(4)
    D = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    cov = CovarianceData(np.linalg.inv(D).T, rows, cols)
    for _ in range(10):
        F = GrassmannElement.random(gens, rng, n_terms=12)
        ber = berezin_integral(F, D.T, rows, cols).scalar()
        assert abs(gaussian_integral(F, cov) - ber) < 1e-12


def test_gaussian_integral_hadamard_bound(rng):
    gens, rows, cols = family_gens(4)
    Gam = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    cov = CovarianceData(Gam, rows, cols)
    h = np.sqrt(cov.norm2)
    for _ in range(50):
        F = GrassmannElement.random(gens, rng, n_terms=10)
        assert abs(gaussian_integral(F, cov)) <= F.norm(h) * (1 + 1e-12)
    for n in range(1, 5):
        xs = list(rng.choice(4, n, replace=False))
        xb = list(rng.choice(4, n, replace=False))
        assert hadamard_ratio(cov, xs, xb) <= 1 + 1e-12


def test_singular_covariance_is_allowed():
    gens, rows, cols = family_gens(2)
    cov = CovarianceData(np.ones((2, 2)), rows, cols)
    four = GrassmannElement.from_terms(gens, {(rows[0], cols[0], rows[1], cols[1]): 1.0})
    assert gaussian_integral(four, cov) == 0
    with pytest.raises(DimensionMismatch):
        CovarianceData(np.ones((2, 3)), rows, cols)


def test_partial_integral():
    gens = GeneratorSet.from_sites(range(2), families=(0, 1))
    rows, cols = gens.select(1, 0), gens.select(1, 1)
    Gam = np.array([[0.3, 0.1], [-0.2, 0.7]])
    cov = CovarianceData(Gam, rows, cols)
    kept = gens.select(0)
    y = gens.index((0, 0, 1, 0))
    F = GrassmannElement.from_terms(gens, {(y, rows[0], cols[1]): 1.0})
    out = partial_gaussian_integral(F, cov)
    assert out.coefficient((kept.index(y),)) == pytest.approx(0.1)
    free = GrassmannElement.from_terms(gens, {(y,): 2.0})
    assert partial_gaussian_integral(free, cov).coefficient((kept.index(y),)) == 2.0


def test_partial_integral_norm_bound(rng):
    gens = GeneratorSet.from_sites(range(2), families=(0, 1))
    rows, cols = gens.select(1, 0), gens.select(1, 1)
    Gam = rng.standard_normal((2, 2))
    cov = CovarianceData(Gam, rows, cols)
    h = max(1.0, np.sqrt(cov.norm2))
    for _ in range(30):
        F = GrassmannElement.random(gens, rng, n_terms=10)
        assert partial_gaussian_integral(F, cov).norm(h) <= F.norm(h) * (1 + 1e-12)


def test_conditional_identity(rng):
    T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    gens, rows, cols = split_generators(3)
    lam = np.array([True, False, True])
    F = GrassmannElement.random(gens, rng, n_terms=10)
    Lc = [rows[1], cols[1]]
    H = GrassmannElement.from_terms(gens, {(Lc[0], Lc[1]): 0.7, (): 1.0})
    lhs, rhs = conditional_identity(T, lam, F, H)
    assert abs(lhs - rhs) < 1e-12


def test_conditional_edge_cases(rng):
    T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    gens, rows, cols = split_generators(3)
    F = GrassmannElement.random(gens, rng, n_terms=8)
    # Lambda empty: nothing is integrated
    assert fermion_conditional(T, np.zeros(3, dtype=bool), F).max_diff(F) < 1e-15
    # Lambda everything: ordinary Gaussian integral with Gamma = T^-1
    full = fermion_conditional(T, np.ones(3, dtype=bool), F)
    assert abs(full.scalar() - berezin_integral(F, T, rows, cols).scalar()) < 1e-12
    G, B, Bb = conditional_means(T, np.ones(3, dtype=bool))
    assert B.size == 0 and np.allclose(G, np.linalg.inv(T))


def test_singular_t_lambda():
    T = np.ones((3, 3))
    with pytest.raises(SingularTLambda):
        conditional_means(T, np.array([True, True, False]))


def test_expansion_cap():
    gens = GeneratorSet.anonymous(22)
    with pytest.raises(ExpansionTooLarge):
        berezin_integral(GrassmannElement.one(gens), np.eye(1), [0], [1])
    with pytest.raises(ExpansionTooLarge):
        matrix_representation(GrassmannElement.one(GeneratorSet.anonymous(13)))
