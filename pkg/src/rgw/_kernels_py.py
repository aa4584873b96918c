"""Pure-Python kernels; the compiled module mirrors these signatures.

Monomials are bit masks (bit ``i`` set means generator ``i`` is present,
factors in increasing order).  The sign of a product of two ordered
monomials is the parity of the number of inversions created by
concatenation.
"""
import numpy as np


def merge_sign(a, b):
    """Sign turning the concatenation ``mono(a) mono(b)`` into ``mono(a|b)``."""
    a, b = int(a), int(b)
    if a & b:
        return 0
    swaps = 0
    while b:
        low = b & -b
        swaps += bin(a & ~((low << 1) - 1)).count("1")
        b ^= low
    return -1 if swaps & 1 else 1


def product_terms(ma, ca, mb, cb):
    """All non-vanishing pairwise products ``(ma[i] ma[j], ca[i] cb[j] sign)``.

    Returns unreduced arrays; equal masks are summed by the caller.
    """
    out_m, out_c = [], []
    for a, x in zip(ma.tolist(), ca.tolist()):
        for b, y in zip(mb.tolist(), cb.tolist()):
            if a & b:
                continue
            s = merge_sign(a, b)
            out_m.append(a | b)
            out_c.append(s * x * y)
    return np.array(out_m, dtype=np.uint64), np.array(out_c, dtype=complex)


def merge_signs(ma, mb):
    """Vectorised ``merge_sign`` over two aligned mask arrays."""
    return np.array([merge_sign(a, b) for a, b in zip(ma.tolist(), mb.tolist())], dtype=np.int64)
