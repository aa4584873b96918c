import os
import subprocess
import sys

import numpy as np
import pytest

from rgw import _kernels_py as pure
from rgw import kernels

try:
    from rgw import _ckernels as compiled
except ImportError:  # pragma: no cover - depends on the build
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def random_masks(rng, n, bits=20, density=0.3):
    return np.array([sum(1 << i for i in range(bits) if rng.random() < density) for _ in range(n)],
                    dtype=np.uint64)


def test_merge_sign_small_cases():
    assert pure.merge_sign(0b001, 0b010) == 1
    assert pure.merge_sign(0b010, 0b001) == -1
    assert pure.merge_sign(0b011, 0b100) == 1
    assert pure.merge_sign(0b110, 0b001) == 1
    assert pure.merge_sign(0b011, 0b010) == 0


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if compiled is not None and not os.environ.get("RGW_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"


def test_pure_python_switch():
    code = "import rgw.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, RGW_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_merge_signs_agree(rng):
    a, b = random_masks(rng, 500), random_masks(rng, 500)
    assert np.array_equal(compiled.merge_signs(a, b), pure.merge_signs(a, b))
    for x, y in zip(a[:50].tolist(), b[:50].tolist()):
        assert compiled.merge_sign(x, y) == pure.merge_sign(x, y)


@needs_compiled
def test_product_terms_agree(rng):
    ma, mb = random_masks(rng, 40, 16, 0.2), random_masks(rng, 30, 16, 0.2)
    ca = rng.standard_normal(40) + 1j * rng.standard_normal(40)
    cb = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    m1, c1 = compiled.product_terms(ma, ca, mb, cb)
    m2, c2 = pure.product_terms(ma, ca, mb, cb)
    assert np.array_equal(m1, m2)
    assert np.array_equal(c1, c2)


@needs_compiled
def test_high_bit_masks(rng):
    a = np.array([1 << 63, (1 << 40) | 1], dtype=np.uint64)
    b = np.array([1 << 5, 1 << 62], dtype=np.uint64)
    assert np.array_equal(compiled.merge_signs(a, b), pure.merge_signs(a, b))
