"""Numba vs numpy timings of the hot kernels, plus one full registration per path.

Usage::

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 5] [--no-register]

Kernel timings call both implementations in this process (the numba ones are
compiled once before timing). The registration timing runs a subprocess per
path with ``MORPHOSCOPE_NUMBA`` set, since the flag is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from morphoscope import _kernels as K
from morphoscope._accel import HAVE_NUMBA

REGISTER_SNIPPET = """
import time
from morphoscope.phantom import PhantomSpec, generate_subject
from morphoscope.register import register
from morphoscope.volume import Grid3
spec = PhantomSpec(grid=Grid3(({n},) * 3))
young, _, _ = generate_subject(spec, 60.0, 0.0, stream=1)
old, _, _ = generate_subject(spec, 75.0, 0.0, stream=2)
register(young, old)  # warm-up (numba compilation / cache load)
t = time.perf_counter()
register(young, old)
print(time.perf_counter() - t)
"""


def _cases(n, rng):
    img = rng.random((n, n, n))
    u = rng.normal(scale=1.5, size=(3, n, n, n))
    cx, cy, cz = (rng.uniform(-1, n, size=(n, n, n)) for _ in range(3))
    sums = [K.box_sum_np(a, 4) for a in (img, img, img * img, img * img, img * img)]
    count = K.box_sum_np(np.ones_like(img), 4)
    mask = np.ones(img.shape, dtype=bool)
    return {
        "sample_scalar": lambda f: f(img, cx, cy, cz),
        "sample_vector": lambda f: f(u, cx, cy, cz),
        "box_sum": lambda f: f(img, 4),
        "compose_disp": lambda f: f(u, u),
        "lncc_terms": lambda f: f(count, *sums, 1e-12, mask),
        "deformation_stats": lambda f: f(u),
        "laplacian": lambda f: f(img),
        "gaussian_smooth": lambda f: f(img, 1.0),
    }


def bench_kernels(n, repeat):
    rng = np.random.default_rng(0)
    print(f"kernels at {n}^3, best of {repeat} (ms)")
    print(f"{'kernel':<20}{'numpy':>10}{'numba':>10}{'speed-up':>10}")
    for name, call in _cases(n, rng).items():
        f_np = getattr(K, f"{name}_np")
        f_nb = getattr(K, f"{name}_nb")
        call(f_nb)
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=repeat)) * 1e3
        print(f"{name:<20}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>9.1f}x")


def bench_register(n):
    print(f"\nfull registration at {n}^3 (s)")
    for flag in ("0", "1"):
        env = dict(os.environ, MORPHOSCOPE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", REGISTER_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"{label:<20}{float(out.stdout.strip()):>10.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-register", action="store_true")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.size, args.repeat)
    if not args.no_register:
        bench_register(args.size)


if __name__ == "__main__":
    main()
