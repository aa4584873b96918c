"""Acceptance criteria 1-12.

Every criterion recomputes its checks through ``rgw.suites`` and compares the
measured values with the tolerances written here (not the config file).
One PASS/FAIL line per criterion is printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from rgw.config import load_config
from rgw.suites import (suite_counterterm, suite_gauss, suite_grassmann, suite_operators,
                        suite_polymer, suite_ptheory, suite_regions, suite_rgstep, suite_twopoint,
                        suite_walk)

RESULTS = {}


@pytest.fixture(scope="module")
def cfg():
    return load_config()


def _by_id(rows):
    return {r.check_id: r for r in rows}


def record(n, title, checks, seconds=None):
    """``checks`` is a list of ``(label, value, ok)``."""
    ok = all(c[2] for c in checks)
    detail = "; ".join(f"{label}={value:.3g}" for label, value, _ in checks)
    if seconds is not None:
        detail += f"; {seconds:.1f}s"
    line = f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def test_criterion_01_averaging_algebra(cfg):
    t = time.time()
    r = _by_id(suite_operators(cfg, fields=10))
    dt = time.time() - t
    v = r["averaging-algebra"].value
    assert record(1, "averaging algebra", [("max residual", v, v < 1e-12), ("seconds", dt, dt < 30)])


def test_criterion_02_clifford(cfg):
    r = _by_id(suite_operators(cfg, fields=1))
    checks = [(k, r[k].value, r[k].value <= 1e-14) for k in ("clifford", "hop-conjugation")]
    assert record(2, "Clifford and charge conjugation", checks)


def test_criterion_03_gauge_covariance(cfg):
    r = _by_id(suite_operators(cfg, fields=10))
    v = r["gauge-covariance"].value
    assert record(3, "gauge covariance of D and Q", [("max residual", v, v < 1e-12)])


def test_criterion_04_diagonalization(cfg):
    r = _by_id(suite_rgstep(cfg, pairs=20))
    checks = [(k, r[k].value, r[k].value < 1e-10)
              for k in ("boson-diagonalization", "fermion-diagonalization", "fermion-inverse")]
    assert record(4, "boson and fermion diagonalization", checks)


@pytest.mark.slow
def test_criterion_05_random_walk(cfg):
    assert cfg.lattice["walk_side"] == 27 and cfg.lattice["walk_M0"] == 9
    t = time.time()
    rows = suite_walk(cfg, max_len=6)
    dt = time.time() - t
    r = _by_id(rows)
    checks = [("||R||", r["norm-R"].value, r["norm-R"].value < 1)]
    for n in range(7):
        row = r[f"partial-sum-{n}"]
        checks.append((f"err{n}/bound", row.value / row.threshold, row.value <= row.threshold))
    for k in ("local-support-boson", "local-support-fermion"):
        checks.append((k, r[k].value, r[k].value == 0))
    assert record(5, "random-walk expansion", checks, dt)


def test_criterion_06_grassmann(cfg):
    r = _by_id(suite_grassmann(cfg))
    checks = [("submultiplicativity excess", r["submultiplicative"].value, r["submultiplicative"].value <= 1e-12),
              ("gaussian vs berezin", r["gaussian-vs-berezin"].value, r["gaussian-vs-berezin"].value < 1e-12),
              ("hadamard ratio", r["hadamard"].value, r["hadamard"].value <= 1.0),
              ("fermion split", r["fermion-split"].value, r["fermion-split"].value < 1e-12)]
    assert record(6, "Grassmann suite", checks)


def test_criterion_07_boson_split(cfg):
    r = _by_id(suite_gauss(cfg))
    checks = [("split relative", r["boson-split"].value, r["boson-split"].value < 1e-10),
              ("three-way", r["quadratic-perturbation"].value, r["quadratic-perturbation"].value < 1e-9)]
    assert record(7, "bosonic conditional split", checks)


def test_criterion_08_counterterm(cfg):
    r = _by_id(suite_counterterm(cfg))
    checks = [("|ratio - 4|", r["quadratic-in-e0"].value, r["quadratic-in-e0"].value <= 1e-10),
              ("dm0 spread", r["dm0-spread"].value, r["dm0-spread"].value < 1e-12),
              ("self trace", r["self-contraction"].value, r["self-contraction"].value < 1e-12),
              ("brute force", r["bruteforce-contraction"].value, r["bruteforce-contraction"].value < 1e-11)]
    assert record(8, "mass counterterm", checks)


def test_criterion_09_ptheta(cfg):
    r = _by_id(suite_ptheory(cfg))
    checks = [(k, r[k].value, r[k].value < 1e-10)
              for k in ("seven-diagram-zero", "seven-diagram-random", "scaling-zero", "scaling-random")]
    assert record(9, "second-order P_Theta", checks)


def test_criterion_10_polymer(cfg):
    r = _by_id(suite_polymer(cfg))
    checks = [("mayer", r["mayer-identity"].value, r["mayer-identity"].value < 1e-11),
              ("exponentiation", r["exponentiation-identity"].value, r["exponentiation-identity"].value < 1e-11),
              ("roundtrip", r["exponentiation-roundtrip"].value, r["exponentiation-roundtrip"].value < 1e-11),
              ("rho golden misses", r["rho-golden"].value, r["rho-golden"].value == 0),
              ("productsum violations", r["productsum-bound"].value, r["productsum-bound"].value == 0),
              ("polymer_sum violations", r["polymer-sum-bound"].value, r["polymer-sum-bound"].value == 0)]
    assert record(10, "polymer engine", checks)


def test_criterion_11_constrained_twopoint(cfg):
    r = _by_id(suite_twopoint(cfg, samples=1_000_000))
    checks = [("sigmas", r["unconstrained-limit"].value, r["unconstrained-limit"].value <= 3.0),
              ("monotonicity breaks", r["monotone-in-p"].value, r["monotone-in-p"].value == 0)]
    assert record(11, "constrained two-point function", checks)


def test_criterion_12_restriction_lemma(cfg):
    r = _by_id(suite_regions(cfg, instances=200))
    checks = [("non-finite", r["constants-finite"].value, r["constants-finite"].value == 0),
              ("C1 batch spread", r["C1-stability"].value, r["C1-stability"].value <= 0.2),
              ("C2 batch spread", r["C2-stability"].value, r["C2-stability"].value <= 0.2)]
    assert record(12, "field restriction lemma", checks)
