import numpy as np
import pytest

from rgw import regions as rg
from rgw.lattice import LatticeError, RegionMask
from rgw.operators import ModelParams
from rgw.rgstep import build_boson_kit

P = ModelParams(e=0.1, m=0.5, mu=0.5)


@pytest.fixture(scope="module")
def kit(lat9):
    return build_boson_kit(lat9, P)


def zeros(lat):
    return np.zeros((3, lat.coarse().nsites)), np.zeros((3, lat.nsites))


def test_chi0_zero_and_outside_support(lat9):
    p = P.p_e0
    A, A0 = zeros(lat9)
    assert rg.chi0(None, A, A0, p, P.mu0, lattice=lat9) == 1
    A0[1, 17] = 2 * p / P.mu0
    assert rg.chi0(None, A, A0, p, P.mu0, lattice=lat9) == 0


def test_chi0_matches_direct_product(lat9, rng):
    p = P.p_e0
    region = RegionMask(lat9, 3, np.arange(27) % 2 == 0)
    A = 0.05 * p * rng.standard_normal((3, 27))
    A[0, [0, 2, 4]] = 0.75 * p
    A0 = 0.02 * p * rng.standard_normal((3, lat9.nsites))
    fast = rg.chi0(region, A, A0, p, P.mu0)
    slow = rg.chi0_direct(lat9, region, A, A0, p, P.mu0)
    assert 0 < fast < 1
    assert fast == pytest.approx(slow, rel=1e-12)


def test_chi0_monotone_in_p(lat9, rng):
    A = rng.standard_normal((3, 27))
    A0 = 0.1 * rng.standard_normal((3, lat9.nsites))
    vals = [rg.chi0(None, A, A0, p, P.mu0, lattice=lat9) for p in (1.0, 2.0, 4.0, 8.0)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_cutoff_split_per_factor(lat9, rng):
    cs = rg.FieldConstraintSet(lat9, 1.0, P.mu0)
    A = rng.standard_normal((3, 27))
    A0 = 0.3 * rng.standard_normal((3, lat9.nsites))
    for f in cs.factors(A, A0):
        assert np.all(f + (1 - f) == 1)
        assert np.all((f >= 0) & (f <= 1))


def test_constraint_set_holds_and_half_violations(lat9):
    cs = rg.FieldConstraintSet(lat9, 1.0, P.mu0)
    A, A0 = zeros(lat9)
    assert cs.holds(A, A0)
    assert not cs.half_violations(A, A0, 3).any()
    A[0, 4] = 0.8
    assert cs.holds(A, A0) and not cs.holds(A, A0, factor=0.5)
    bad = cs.half_violations(A, A0, 3)
    assert bad.sum() == 1 and bad[4]


def test_restriction_zero_field(kit, lat9):
    A, A0 = zeros(lat9)
    rep = rg.restriction_lemma_check(kit, None, A, A0, P.p_e0)
    assert rep.C1 == rep.C2 == rep.key == 0
    assert rep.finite()


def test_restriction_rejects_violated_hypothesis(kit, lat9):
    A, A0 = zeros(lat9)
    A[0, 0] = 10 * P.p_e0
    with pytest.raises(rg.HypothesisViolated):
        rg.restriction_lemma_check(kit, None, A, A0, P.p_e0)


def test_restriction_needs_inner_region(kit, lat9):
    A, A0 = zeros(lat9)
    region = RegionMask(lat9, 3, np.arange(27) != 13)
    with pytest.raises(LatticeError):
        rg.restriction_lemma_check(kit, region, A, A0, P.p_e0)


def test_admissible_instances(kit, rng):
    p = P.p_e0
    for _ in range(5):
        A, A0 = rg.admissible_instance(kit, None, p, rng)
        rep = rg.restriction_lemma_check(kit, None, A, A0, p)
        assert rep.hypothesis_margin <= 1
        assert rep.finite()


def test_restriction_stability(kit):
    st = rg.restriction_stability(kit, P.p_e0, seed=1, instances=20)
    assert len(st.batch_max_C1) == 2 and st.instances == 20
    assert all(np.isfinite(st.batch_max_C1 + st.batch_max_C2))


def test_zeta_star(lat9):
    p = 1.0
    A0 = np.zeros((3, lat9.nsites))
    assert rg.zeta_star(lat9, 3, [], A0, p).value == 1
    assert rg.zeta_star(lat9, 3, [0], A0, p).value == 0
    x = int(np.flatnonzero(lat9.block_labels == 0)[0])
    A0[2, x] = 100.0
    z = rg.zeta_star(lat9, 3, [0], A0, p)
    assert z.value == -1 and z.enumerated == -1
    assert z.holds


def test_zeta_star_enumeration_two_blocks(lat9, rng):
    A0 = np.zeros((3, lat9.nsites))
    for b in (0, 1):
        sites = np.flatnonzero(lat9.block_labels == b)[:3]
        A0[0, sites] = rng.uniform(1.2, 2.5, size=3)
    z = rg.zeta_star(lat9, 3, [0, 1], A0, 1.0)
    assert z.value != 0
    assert z.enumerated == pytest.approx(z.value, rel=1e-12)
    A0[0] = 5.0
    with pytest.raises(ValueError):
        rg.zeta_star(lat9, 3, [0], A0, 1.0)
