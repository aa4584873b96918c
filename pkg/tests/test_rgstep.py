import numpy as np
import pytest

from rgw.grassmann import GrassmannElement
from rgw.lattice import BondField, RegionMask, TorusLattice, gradient
from rgw.operators import ModelParams, gauge_phase
from rgw.rgstep import (FieldTooRough, background_consistency, blocks_adjacent,
                        boson_inverse_check, boson_translate_check, build_boson_kit,
                        build_fermion_kit, fermion_forms, fermion_inverse_check,
                        fermion_translate_check, localize_potential, potential_v0,
                        roughness, scale_step, wb_decomposition,
                        wf_decomposition)

P = ModelParams(e=0.1, m=0.5, mu=0.5)


@pytest.fixture(scope="module")
def bkit(lat9):
    return build_boson_kit(lat9, P)


@pytest.fixture(scope="module")
def fkit(lat9):
    A = BondField.random(lat9, np.random.default_rng(7), 1e-3)
    return build_fermion_kit(lat9, P, A)


def test_heavy_mass_covariance():
    lat = TorusLattice(9, 3)
    mu2 = 100.0
    kit = build_boson_kit(lat, ModelParams(e=0.1, mu=10.0))
    dev = 1 - np.diag(kit.C) * mu2
    # first Neumann term: diag(-Delta + k Q^T Q) / mu^2, with the next order as tolerance
    first = (6 + kit.k / 27) / mu2
    assert np.abs(dev - first).max() < 50 / mu2 ** 2


def test_h1_on_constants(bkit):
    out = bkit.apply_H1(np.ones(bkit.coarse.nsites))
    assert np.abs(out - 1).max() < 10 * P.mu0 ** 2


def test_delta_tilde_spectrum(bkit):
    ev = np.linalg.eigvalsh(bkit.delta_tilde1)
    assert ev.min() >= -1e-12 and ev.max() <= bkit.k + 1e-12
    assert np.abs(bkit.delta_tilde1 - bkit.delta_tilde1.T).max() < 1e-14
    assert np.linalg.eigvalsh(bkit.delta_sharp.toarray()).min() >= P.mu0 ** 2 - 1e-12


def test_boson_translation(bkit, rng):
    zero = boson_translate_check(bkit, np.zeros((3, 27)), np.zeros((3, 729)))
    assert zero[0] == 0
    for _ in range(3):
        A, A0 = rng.standard_normal((3, 27)), rng.standard_normal((3, 729))
        res, scale = boson_translate_check(bkit, A, A0)
        assert res < 1e-10 * scale
        res, scale = boson_inverse_check(bkit, A, A0)
        assert res < 1e-10 * scale
    with pytest.raises(ValueError):
        boson_translate_check(bkit, np.zeros((3, 26)), np.zeros((3, 729)))


def test_fermion_translation(fkit, rng):
    res, cross = fermion_translate_check(fkit)
    assert res < 1e-10 and cross < 1e-11
    r, scale = fermion_inverse_check(fkit, rng)
    assert r < 1e-10 * scale


def test_fermion_translation_free_case():
    lat = TorusLattice(3, 3)
    kit = build_fermion_kit(lat, ModelParams(e=0.0, m=0.5, mu=0.5))
    res, cross = fermion_translate_check(kit)
    assert res < 1e-11 and cross < 1e-11
    # the blockwise check agrees with the dense product
    K, T, Tb = fermion_forms(kit)
    lhs = Tb.T @ K @ T
    assert np.abs(lhs[:4, 4:]).max() < 1e-11


def test_gamma_matches_dense_inverse_at_zero_field(lat3):
    kit = build_fermion_kit(lat3, P)
    assert np.abs(kit.gamma - np.linalg.inv(kit.d_sharp.toarray())).max() < 1e-12


def test_gamma_gauge_covariance(lat3, rng):
    e0 = 0.3
    params = ModelParams(e=e0, m=0.5, mu=0.5)
    lam = 1e-3 * rng.standard_normal(lat3.nsites)
    k0 = build_fermion_kit(lat3, params)
    k1 = build_fermion_kit(lat3, params, gradient(lat3, lam))
    g = np.diag(gauge_phase(lat3, lam, e0))
    # A = d lam is the zero field transformed with -lam
    assert np.abs(k1.gamma - g.conj() @ k0.gamma @ g).max() < 1e-12
    det0, det1 = k0.logdet(), k1.logdet()
    assert abs(np.exp(det1 - det0) - 1) < 1e-10


def test_rough_field_rejected(lat9, rng):
    A = BondField.random(lat9, rng, 10.0)
    assert roughness(lat9, A, P.e0) > 0.01
    with pytest.raises(FieldTooRough):
        build_fermion_kit(lat9, P, A)


def test_m_op_left_inverse(fkit, lat9):
    region = RegionMask(lat9, 3, np.arange(27) < 14)
    M, Mbar, H_L, Hbar_L, cm = fkit.m_op(region)
    eye = np.eye(cm.size)
    assert np.abs(M @ H_L - eye).max() < 1e-11
    assert np.abs(Mbar @ Hbar_L - eye).max() < 1e-11


def test_potential_v0(lat9, rng):
    At = BondField.random(lat9, rng, 1e-3)
    zero = potential_v0(lat9, P, At, np.zeros((3, 729)))
    assert zero.matrix.nnz == 0
    small = [potential_v0(lat9, P, At, s * rng.standard_normal((3, 729))).norm(1.0)
             for s in (1e-3, 2e-3)]
    assert 1.5 < small[1] / small[0] < 2.5


def test_localize_potential(lat9, rng):
    v0 = potential_v0(lat9, P, BondField(lat9), 0.1 * rng.standard_normal((3, 729)))
    pieces = localize_potential(v0, 3)
    total = sum(p.matrix for p in pieces.values())
    assert abs(total - v0.matrix).max() < 1e-13
    for b1, b2 in pieces:
        assert blocks_adjacent(lat9, 3, b1, b2)
    assert not blocks_adjacent(lat9, 3, 0, 4)


def test_bilinear_to_grassmann(lat3, rng):
    v0 = potential_v0(lat3, P, BondField(lat3), 0.1 * rng.standard_normal((3, 27)))
    n = v0.matrix.shape[0]
    assert n == 4 * 28
    g = v0.to_grassmann(GrassmannElement)
    assert len(g.gens) == 2 * n
    assert len(g.terms) == v0.matrix.nnz
    assert all(bin(m).count("1") == 2 for m in g.terms)


def test_wb_decomposition(bkit, lat9, rng):
    full = RegionMask.full(lat9, 3)
    A, A0 = rng.standard_normal((3, 27)), rng.standard_normal((3, 729))
    led = wb_decomposition(bkit, full, A, A0)
    assert led.residual < 1e-10 * abs(led.total)
    assert abs(led.W_total) < 1e-10 * abs(led.total)


def test_wf_decomposition_full_region(fkit, lat9, rng):
    full = RegionMask.full(lat9, 3)
    n_c, n_f = fkit.Qp.shape

    def cvec(n):
        return rng.standard_normal(n) + 1j * rng.standard_normal(n)

    fields = (cvec(n_c), cvec(n_c), cvec(n_f), cvec(n_f))
    led = wf_decomposition(fkit, full, fields)
    assert led.residual < 1e-10 * abs(led.total)
    assert abs(led.W_total) < 1e-10 * abs(led.total)


def test_scale_step_identities(lat9):
    res = scale_step(lat9, P)
    for name, v in res.items():
        assert v < 1e-11, name
    assert background_consistency(lat9, P, np.random.default_rng(3).standard_normal((3, 27))) < 1e-11
