"""Compare the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the median wall time per call for each kernel and backend and checks
that both backends return bit-identical outputs.
"""
import argparse
import statistics
import time

import numpy as np

from mpapkit import _kernels_py

try:
    from mpapkit import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def _time(fn, repeat):
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), out


def _cases(rng):
    n = 200
    q = np.maximum(np.sin(np.linspace(0, 2 * np.pi, n, endpoint=False)), 0.0) * 3e-4
    out = np.empty(n)

    def rk4(k):
        return lambda: (k.rk4_cycle(q, 0.8 / n, 8e6, 1e-8, 6e7, 1000.0, 4, out), out.copy())

    X = rng.normal(size=(350, 40))
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T, dtype=np.intc)
    g = rng.normal(size=350)
    h = np.ones(350)
    sel = np.ones(350, dtype=np.int8)
    feats = np.arange(40, dtype=np.intc)

    def grow(k):
        return lambda: k.grow_tree(X, order, g, h, sel, feats, 5, 3, 0.0, 1.0)

    trees = [compiled.grow_tree(X, order, rng.normal(size=350), h, sel, feats, 5, 3, 0.0, 1.0)
             if compiled else _kernels_py.grow_tree(X, order, rng.normal(size=350), h, sel, feats,
                                                     5, 3, 0.0, 1.0)
             for _ in range(50)]
    flat = [np.concatenate([t[i] for t in trees]) for i in (0, 1, 2, 3, 4)]
    sizes = [len(t[0]) for t in trees]
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int_)
    default_left = np.ones(len(flat[0]), dtype=np.int8)
    weights = np.full(len(trees), 0.1)

    def forest(k):
        return lambda: k.predict_forest(X, *flat, default_left, offsets, weights, 0.0)

    return {"rk4_cycle (n=200, 4 substeps)": rk4, "grow_tree (350x40, depth 5)": grow,
            "predict_forest (50 trees, 350 rows)": forest}


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for name, make in _cases(rng).items():
        t_py, out_py = _time(make(_kernels_py), args.repeat)
        if compiled is None:
            print(f"{name:40s} {t_py * 1e3:10.3f} {'n/a':>10s}")
            continue
        t_c, out_c = _time(make(compiled), args.repeat)
        print(f"{name:40s} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:8.1f}x  {_same(out_py, out_c)}")


if __name__ == "__main__":
    main()
