import numpy as np
import pytest

from rgw import perturbation as pt
from rgw.lattice import TorusLattice
from rgw.operators import CliffordRep, ModelParams

P = ModelParams(e=0.1, m=0.5, mu=0.5)


@pytest.fixture(scope="module")
def theta(lat9):
    reg = pt.theta_region(lat9, [0])
    ker = pt.DressedKernels.random(reg, 1, np.random.default_rng(0))
    cov = pt.default_covariances(reg, P)
    return reg, ker, cov


def lifted_dense(lat, arr, antiperiodic):
    c = np.asarray(lat.coords)
    d = c[:, None, :] - c[None, :, :]
    return pt.kernel_at(arr, d, antiperiodic)


def test_vertex_order_and_kernel(lat3, rep):
    with pytest.raises(pt.VertexOrderError):
        pt.vertex(4, 0.1, rep, lat3)
    v = pt.vertex(1, 0.2, rep, lat3)
    mu, z = 1, 5
    coeffs = np.zeros((3, lat3.nsites))
    coeffs[mu, z] = 1.0
    M = v.matrix(coeffs).toarray()
    for (x, y), blk in v.kernel(mu, z).items():
        assert np.allclose(M[4 * x:4 * x + 4, 4 * y:4 * y + 4], blk)
    assert np.count_nonzero(np.abs(M) > 0) == 2 * np.count_nonzero(rep.hop(mu, 1))


def test_vertex_is_derivative(lat3, rep, rng):
    errs, orders = pt.vertex_fd_check(lat3, 0.3, rep, rng)
    assert errs[-1] < 1e-4
    assert all(abs(o - 2) < 0.1 for o in orders)


def test_higher_vertex_factors(lat3, rep):
    e0 = 0.3
    v1, v2, v3 = (pt.vertex(n, e0, rep, lat3).blocks(0) for n in (1, 2, 3))
    c = 1j * e0 * lat3.spacing
    assert np.allclose(v2[0], c * v1[0]) and np.allclose(v2[1], -c * v1[1])
    assert np.allclose(v3[0], c * c * v1[0])


def test_free_kernels_match_dense(lat3, rep):
    S = pt.dense_free_fermion(lat3, 0.4, rep)
    s = pt.free_fermion_kernel(lat3, 0.4, rep)
    lifted = lifted_dense(lat3, s, True)
    dense = S.reshape(27, 4, 27, 4).transpose(0, 2, 1, 3)
    assert np.abs(lifted - dense).max() < 1e-12
    C = pt.dense_free_boson(lat3, 0.3)
    c = pt.free_boson_kernel(lat3, 0.3)
    assert np.abs(lifted_dense(lat3, c, False) - C).max() < 1e-12


def test_sigma0_routes_agree(lat3, rep):
    dense = pt.sigma0(lat3, P, rep, dense=True)
    kern = pt.sigma0_kernel(lat3, P, rep)
    assert dense.matrix is not None and kern.matrix is None
    assert np.abs(dense.g - kern.g).max() < 1e-14
    for x, y in ((0, 0), (3, 10), (26, 1)):
        assert np.abs(dense.block(x, y) - kern.block(x, y)).max() < 1e-14


def test_sigma0_quadratic_in_e0(lat3, rep):
    a = pt.sigma0_kernel(lat3, P, rep)
    b = pt.sigma0_kernel(lat3, P, rep, e0=2 * P.e0)
    assert np.abs(b.g - 4 * a.g).max() < 1e-14 * np.abs(b.g).max()
    zero = pt.sigma0_kernel(lat3, P, rep, e0=0.0)
    assert np.abs(zero.g).max() == 0


def test_sigma0_bruteforce(lat3, rep):
    sig = pt.sigma0(lat3, P, rep)
    pairs = [(0, 0), (1, 0), (13, 4), (26, 0)]
    for (x, y), v in pt.sigma0_bruteforce(lat3, P, pairs, rep).items():
        assert np.abs(v - sig.block(x, y)).max() < 1e-12


def test_sigma0_decay(lat9, rep):
    shells, vals = pt.sigma0_kernel(lat9, P, rep).decay()
    assert shells[0] == 0
    assert vals[-1] < vals[:3].max()


def test_dm0_report(lat3, rep):
    rep_ = pt.dm0(pt.sigma0(lat3, P, rep), P, rep)
    assert rep_.spread < 1e-12
    assert rep_.self_trace < 1e-12
    assert rep_.wick_residual < 1e-13
    assert rep_.conjugation_residual < 1e-12
    assert rep_.nonscalar_residual < 1e-12 * abs(rep_.scalar_part)
    summary = rep_.summary()
    assert summary["dE0_slots"] == [] and len(summary["dm0_real"]) == 4


def test_dm0_ladder_converges(rep):
    (n1, a), (n2, b) = pt.dm0_ladder(P, sides=(9, 27), rep=rep)
    assert (n1, n2) == (9, 27)
    assert abs(a - b) < 0.02 * abs(b)
    assert abs(b.imag) < 1e-12


def test_delta_e0():
    assert pt.delta_E0([], 3, 1, 1) is None
    assert pt.delta_E0([None, None], 3, 1, 1) is None
    assert pt.delta_E0([1.0, None, 2.0], 3, 1, 1) == pytest.approx(3 ** 6 + 2.0)


def test_theta_region(lat9):
    reg = pt.theta_region(lat9, [0, 1, 1])
    assert reg.blocks.tolist() == [0, 1] and reg.sites.size == 54
    ends = [lat9.forward(mu)[x] for mu, x in zip(reg.bond_mu, reg.bond_x)]
    assert reg.mask[ends].all()
    with pytest.raises(ValueError):
        pt.theta_region(lat9, [])
    with pytest.raises(ValueError):
        pt.theta_region(lat9, [27])


def test_potential_derivatives(theta, rng):
    reg, ker, _ = theta
    pot = pt.ThetaPotential(reg, P, ker)
    assert np.abs(pot.matrix(np.zeros(reg.nbonds))).max() < 1e-15
    assert pot.support_violations() == 0
    h = 1e-4
    for b in rng.choice(reg.nbonds, 3, replace=False):
        e = np.zeros(reg.nbonds)
        e[b] = h
        fd = (pot.matrix(e) - pot.matrix(-e)) / (2 * h)
        assert np.abs(fd - pot.first(b)).max() < 1e-6 * max(1.0, np.abs(pot.first(b)).max())
        fd2 = (pot.matrix(e) - 2 * pot.matrix(0 * e) + pot.matrix(-e)) / h ** 2
        assert np.abs(fd2 - pot.second(b, b)).max() < 1e-4 * max(1.0, np.abs(fd2).max())
    c = rng.standard_normal((reg.nbonds, reg.nbonds))
    c = c + c.T
    direct = sum(c[b, bp] * pot.second(b, bp) for b, bp in pot.second_pairs())
    assert np.abs(direct - pot.second_contracted(c)).max() < 1e-12


def test_wick_engine_single_and_pair(rng):
    n = 3
    Gam = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    eng = pt.WickEngine(0, Gam)
    M = rng.standard_normal((n, n))
    one = eng.expect([M]).scalar()
    assert one == pytest.approx(-np.trace(M @ Gam))
    MG = M @ Gam
    two = eng.expect([M, M]).scalar()
    assert two == pytest.approx(np.trace(MG) ** 2 - np.trace(MG @ MG))


def test_wick_engine_external_part(rng):
    m, n = 2, 3
    Gam = rng.standard_normal((n, n))
    eng = pt.WickEngine(m, Gam)
    M = np.zeros((m + n, m + n))
    M[:m, :m] = rng.standard_normal((m, m))
    out = eng.expect([M])
    assert out.max_diff(pt.bilinear_element(eng.gens, M[:m, :m])) < 1e-15


def test_p_theta_and_scaling(theta):
    reg, ker, cov = theta
    rep = CliffordRep()
    p = pt.p_theta(reg, P, ker, None, rep, covariances=cov)
    _, rel = p.residual()
    assert rel < 1e-10
    sc = pt.scale_p(p, P, rep)
    assert sc.relative < 1e-10
    assert max(sc.propagator_residuals.values()) < 1e-12
    assert np.isfinite(p.constant_per_volume())


def test_p_theta_free_fields_vanish(theta):
    reg, ker, cov = theta
    p = pt.p_theta(reg, ModelParams(e=0.0, m=0.5, mu=0.5), ker, covariances=cov)
    assert max([abs(c) for c in p.value.terms.values()] + [0.0]) < 1e-15
