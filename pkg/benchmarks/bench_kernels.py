"""Compare the compiled Grassmann kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--terms 200] [--bits 24] [--repeat 5]

Both backends get the same random inputs; outputs are checked for equality
before timing.
"""
import argparse
import timeit

import numpy as np

from rgw import _kernels_py as pure

try:
    from rgw import _ckernels as compiled
except ImportError:
    compiled = None


def masks(rng, n, bits, density):
    return np.array([sum(1 << i for i in range(bits) if rng.random() < density) for _ in range(n)],
                    dtype=np.uint64)


def best(fn, repeat):
    t = timeit.Timer(fn)
    number, _ = t.autorange()
    return min(t.repeat(repeat, number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--terms", type=int, default=200, help="terms per operand")
    ap.add_argument("--bits", type=int, default=24, help="number of generators")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels not built; nothing to compare")
        return 1
    rng = np.random.default_rng(args.seed)
    ma = masks(rng, args.terms, args.bits, 0.15)
    mb = masks(rng, args.terms, args.bits, 0.15)
    ca = rng.standard_normal(args.terms) + 1j * rng.standard_normal(args.terms)
    cb = rng.standard_normal(args.terms) + 1j * rng.standard_normal(args.terms)

    cases = {
        "merge_signs": lambda mod: mod.merge_signs(ma, mb),
        "product_terms": lambda mod: mod.product_terms(ma, ca, mb, cb),
    }
    print(f"{'kernel':<16}{'python [s]':>14}{'cython [s]':>14}{'speedup':>10}")
    for name, call in cases.items():
        a, b = call(pure), call(compiled)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        if not same:
            raise SystemExit(f"{name}: backends disagree")
        tp = best(lambda: call(pure), args.repeat)
        tc = best(lambda: call(compiled), args.repeat)
        print(f"{name:<16}{tp:>14.3e}{tc:>14.3e}{tp / tc:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
