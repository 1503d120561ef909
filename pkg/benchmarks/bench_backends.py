"""Compare the compiled kernels with the numpy fallback.

Times STAPLE fusion and connected-component labeling on a phantom at a
few sizes and prints one line per (kernel, size, backend).  Both backends
must produce identical label maps; the script exits nonzero otherwise.

    python benchmarks/bench_backends.py [--sizes 64 128] [--repeat 3]
"""

import argparse
import sys
import time

import numpy as np

from cbctseg import _backend
from cbctseg.fusion import staple_fuse
from cbctseg.labelspace import apply_remap, builtin_table
from cbctseg.phantom import PhantomSpec, generate_phantom, simulate_raters
from cbctseg.postprocess import component_map


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def available():
    names = []
    for name in ("cython", "python"):
        try:
            _backend.get(name)
            names.append(name)
        except ImportError:
            print(f"# {name} backend unavailable", file=sys.stderr)
    return names


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128])
    p.add_argument("--raters", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    table = builtin_table()
    backends = available()
    print(f"# threads={_backend.num_threads()} backends={','.join(backends)}")
    print(f"{'kernel':<10} {'size':>6} {'backend':<8} {'seconds':>9} {'speedup':>8}")
    mismatch = False
    for n in args.sizes:
        spec = PhantomSpec(dims=(n, n, max(32, n // 2)), n_teeth=16 if n >= 96 else 8)
        _, ref = generate_phantom(spec)
        dense = apply_remap(ref, table, "to-dense")
        raters = simulate_raters(dense, args.raters, np.linspace(0.02, 0.08, args.raters), 1, seed=0)
        cases = {
            "staple": lambda b: staple_fuse(raters, n_labels=table.n_dense, backend=b).consensus.data,
            "cc26": lambda b: component_map(dense, 26, backend=b)[0],
        }
        for kernel, fn in cases.items():
            results = {}
            for b in backends:
                results[b] = best_of(lambda: fn(b), args.repeat)
            base = results.get("python", next(iter(results.values())))[0]
            for b, (secs, _) in results.items():
                print(f"{kernel:<10} {n:>6} {b:<8} {secs:>9.3f} {base / secs:>7.1f}x")
            outs = [r[1] for r in results.values()]
            if any(not np.array_equal(outs[0], o) for o in outs[1:]):
                print(f"# {kernel} at {n}: backends disagree", file=sys.stderr)
                mismatch = True
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())
