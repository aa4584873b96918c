import numpy as np
import pytest

from rgw.bosongauss import (DegenerateDenominator, GaussianSpec, MomentOracle, NotPositiveDefinite,
                            Poly, SeriesDivergent, SingularTLambda, chain_covariance, chi_star,
                            conditional_expectation, conditional_mean_map, conditional_split,
                            constrained_twopoint, gauss_hermite_expect, quadratic_perturbation,
                            quadratic_perturbation_wick, smooth_cutoff)


def random_spd(rng, d, shift=None):
    X = rng.standard_normal((d, d))
    T = X @ X.T + (d if shift is None else shift) * np.eye(d)
    return 0.5 * (T + T.T)


def test_poly_arithmetic_and_evaluation(rng):
    x = Poly.var(2, 0)
    y = Poly.var(2, 1)
    p = (x + 2 * y) ** 2 - 3
    pts = rng.standard_normal((2, 5))
    assert np.allclose(p(pts), (pts[0] + 2 * pts[1]) ** 2 - 3)
    assert p.degree() == 2 and p.variables() == {0, 1}
    M = np.array([[1.0, 2.0], [0.0, -1.0]])
    q = Poly.quadratic(M)
    v = np.array([0.3, -1.2])
    assert q(v) == pytest.approx(v @ M @ v)


def test_poly_substitute(rng):
    p = Poly.random(3, rng, 3)
    ident = [Poly.var(3, i) for i in range(3)]
    assert p.substitute(ident).max_diff(p) < 1e-14
    shift = [Poly.var(3, i) + 1.0 for i in range(3)]
    v = rng.standard_normal(3)
    assert p.substitute(shift)(v) == pytest.approx(p(v + 1.0))


def test_moment_oracle_low_orders(rng):
    C = random_spd(rng, 3)
    orc = MomentOracle(C)
    assert orc.central((0, 0, 0)) == 1
    assert orc.central((1, 0, 0)) == 0
    assert orc.central((1, 1, 0)) == pytest.approx(C[0, 1])
    assert orc.central((4, 0, 0)) == pytest.approx(3 * C[0, 0] ** 2)
    four = C[0, 1] * C[2, 2] + 2 * C[0, 2] * C[1, 2]
    assert orc.central((1, 1, 2)) == pytest.approx(four)


def test_moment_oracle_matches_quadrature(rng):
    C = random_spd(rng, 2, shift=1.0)
    mean = np.array([0.4, -0.3])
    p = Poly.random(2, rng, 5, n_terms=8)
    exact = MomentOracle(C, mean).expect(p)
    assert exact == pytest.approx(gauss_hermite_expect(p, C, mean), rel=1e-10, abs=1e-12)
    with pytest.raises(ValueError):
        MomentOracle(C).expect(Poly.const(3))


def test_gaussian_spec_checks(rng):
    T = random_spd(rng, 3)
    spec = GaussianSpec(T)
    assert np.allclose(spec.covariance @ T, np.eye(3))
    with pytest.raises(NotPositiveDefinite):
        GaussianSpec(-np.eye(2))
    with pytest.raises(ValueError):
        GaussianSpec(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_conditional_split_full_lambda_is_fubini(rng):
    T = random_spd(rng, 4)
    F = Poly.random(4, rng, 4, n_terms=10)
    H = Poly.const(4, 1.0)
    res = conditional_split(T, np.ones(4, bool), F, H)
    assert res.residual < 1e-12 * max(1.0, abs(res.lhs))
    # F~ is a constant equal to the full expectation
    Ft = conditional_expectation(T, np.ones(4, bool), F)
    assert Ft.degree() == 0


def test_conditional_split_empty_lambda_is_identity(rng):
    T = random_spd(rng, 3)
    F = Poly.random(3, rng, 3)
    assert conditional_expectation(T, np.zeros(3, bool), F).max_diff(F) == 0
    CL, M = conditional_mean_map(T, np.zeros(3, bool))
    assert CL.shape == (0, 0) and M.shape == (0, 3)


def test_conditional_split_six_dims(rng):
    d = 6
    T = random_spd(rng, d)
    lam = np.array([True, False, True, True, False, False])
    F = Poly.random(d, rng, 4, n_terms=12)
    Lc = np.flatnonzero(~lam)
    Mq = np.zeros((d, d))
    Mq[np.ix_(Lc, Lc)] = rng.standard_normal((3, 3))
    H = Poly.quadratic(Mq) + Poly.linear([0.5 if not l else 0.0 for l in lam], 1.0)
    res = conditional_split(T, lam, F, H)
    assert res.residual < 1e-10 * max(1.0, abs(res.lhs))
    # F~ does not depend on Lambda variables
    Ft = conditional_expectation(T, lam, F)
    assert not (Ft.variables() & set(np.flatnonzero(lam).tolist()))
    with pytest.raises(ValueError):
        conditional_split(T, lam, F, Poly.var(d, 0))


def test_conditional_mean_map_matches_schur(rng):
    T = random_spd(rng, 5)
    lam = np.array([True, True, False, False, True])
    CL, M = conditional_mean_map(T, lam)
    C = np.linalg.inv(T)
    L, Lc = np.flatnonzero(lam), np.flatnonzero(~lam)
    # regression of A_L on A_Lc under N(0, C)
    reg = C[np.ix_(L, Lc)] @ np.linalg.inv(C[np.ix_(Lc, Lc)])
    assert np.abs(M - reg).max() < 1e-12
    schur = C[np.ix_(L, L)] - reg @ C[np.ix_(Lc, L)]
    assert np.abs(CL - schur).max() < 1e-12


def test_singular_t_lambda():
    T = np.array([[0.0, 1.0], [1.0, 2.0]])
    with pytest.raises(SingularTLambda):
        conditional_mean_map(T, np.array([True, False]))


def test_quadratic_perturbation_trivial_cases(rng):
    C = random_spd(rng, 3)
    out = quadratic_perturbation(C, np.zeros((3, 3)), np.zeros(3))
    assert out.closed == 1 and out.series == 1
    f = rng.standard_normal(3)
    out = quadratic_perturbation(C, np.zeros((3, 3)), f)
    assert out.closed == pytest.approx(np.exp(0.5 * f @ C @ f), rel=1e-13)


def test_quadratic_perturbation_three_way(rng):
    C = chain_covariance(3, mass=1.0)
    w2 = 0.2 * random_spd(rng, 3, shift=0.0) / 3
    f = 0.3 * rng.standard_normal(3)
    out = quadratic_perturbation(C, w2, f)
    wick = quadratic_perturbation_wick(C, w2, f, order=30)
    assert abs(out.closed - out.series) < 1e-9
    assert abs(out.closed - wick) < 1e-9
    assert out.series_bound < 1e-9


def test_quadratic_perturbation_diverges():
    C = np.eye(2)
    with pytest.raises(SeriesDivergent):
        quadratic_perturbation(C, 1.5 * np.eye(2), np.zeros(2))


def test_smooth_cutoff():
    assert smooth_cutoff(0.3) == 1
    assert smooth_cutoff(1.2) == 0
    assert 0 < smooth_cutoff(0.75) < 1
    assert smooth_cutoff(-0.75) == smooth_cutoff(0.75)
    eps = 1e-7
    for a in (0.5, 1.0):
        chi, d1, _ = smooth_cutoff(np.array([a - eps, a + eps]), derivatives=True)
        assert abs(chi[0] - chi[1]) < 1e-12
        assert np.abs(d1).max() < 1e-10
    # derivative matches finite differences inside the ramp
    a = np.linspace(0.55, 0.95, 9)
    _, d1, d2 = smooth_cutoff(a, derivatives=True)
    h = 1e-5
    fd = (smooth_cutoff(a + h) - smooth_cutoff(a - h)) / (2 * h)
    assert np.abs(d1 - fd).max() < 1e-7
    fd2 = (smooth_cutoff(a + h) - 2 * smooth_cutoff(a) + smooth_cutoff(a - h)) / h ** 2
    assert np.abs(d2 - fd2).max() < 1e-3


def test_chi_star_shapes():
    s = np.zeros((4, 5))
    assert np.all(chi_star(s, 1.0) == 1)
    big = np.full((2, 5, 3), 10.0)
    assert np.all(chi_star(big, 1.0) == 0)
    assert np.all(chi_star(big, np.inf) == 1)


def test_constrained_twopoint_symmetry_and_limit():
    C = chain_covariance(4)
    a = constrained_twopoint(C, 0, 2, 1.0, samples=40_000, seed=3)
    b = constrained_twopoint(C, 2, 0, 1.0, samples=40_000, seed=3)
    assert a.value == pytest.approx(b.value, rel=1e-12)
    free = constrained_twopoint(C, 0, 2, np.inf, samples=200_000, seed=4)
    assert free.acceptance == 1
    assert free.sigmas < 4


def test_constrained_twopoint_monotone_in_p():
    C = chain_covariance(4)
    vals = [constrained_twopoint(C, 1, 1, p, samples=100_000, seed=5).value for p in (0.2, 0.5, 2.0)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] <= C[1, 1] * 1.05


def test_constrained_twopoint_errors():
    C = chain_covariance(3)
    with pytest.raises(ValueError):
        constrained_twopoint(C, 0, 1, 1.0, samples=10, batches=100)
    with pytest.raises(DegenerateDenominator):
        constrained_twopoint(C, 0, 1, 1e-6, samples=1000, batches=10, seed=1)
